//! Finite-difference verification of every analytic backward pass on a tiny
//! configuration.
//!
//! Each entry compares an analytic gradient tensor with central differences
//! using the normwise relative error `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, 1e-12)`.
//! The check runs over a ladder of steps and keeps each entry's best error:
//! large steps straddle relu and max-selection kinks, small steps lose the
//! weakly coupled attention gradients to roundoff.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamStore, PreparedInput};
use crate::error::Result;
use crate::fusion::{modal_fuse, modal_fuse_backward, FusionParams};
use crate::grp::{grp_backward, grp_forward, GrpParams};
use crate::head::{classify, classify_backward, cross_entropy_loss, HeadParams, SemanticGrid};
use crate::pdconv::{backbone_backward_taped, backbone_forward, backbone_forward_taped, BlockKernels};
use crate::tensor::{conv3d, conv3d_backward, finite_diff_grad, relu, relu_backward, Tensor};
use crate::voxelize::{FeatureVolume, LidarPoint, PointCloud};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const FD_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    /// Negates the analytic gradient of the entry with this name, to show
    /// that a wrong backward pass is caught.
    pub corrupt: Option<String>,
    /// Central-difference steps, relative to `max(1, |x|)`.
    pub steps: Vec<f64>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { corrupt: None, steps: FD_STEPS.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub module: String,
    /// Parameter name, `<module>.input*` for input gradients, or
    /// `pipeline.directional` for the end-to-end check.
    pub name: String,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradcheckEntry>,
    pub passed: bool,
}

impl GradcheckReport {
    /// Worst error per module, in first-appearance order.
    pub fn per_module(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for e in &self.entries {
            match out.iter_mut().find(|(m, _)| *m == e.module) {
                Some((_, v)) => *v = v.max(e.max_rel_error),
                None => out.push((e.module.clone(), e.max_rel_error)),
            }
        }
        out
    }
}

/// Gradients smaller than this are treated as zero. Finite differences of
/// the unit-scale readouts resolve about 1e-9 at the smallest step, and real
/// module gradients sit above 1e-3, so a gradient that is zero by
/// construction (the position bias ahead of the channel softmax in literal
/// mode) compares as noise against noise without this floor.
const GRAD_FLOOR: f64 = 1e-6;

fn normwise_error(a: &Tensor<f64>, n: &Tensor<f64>) -> f64 {
    let diff = a.data().iter().zip(n.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    diff / a.max_abs().max(n.max_abs()).max(GRAD_FLOOR)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

struct Collector<'a> {
    opts: &'a GradcheckOptions,
    entries: Vec<GradcheckEntry>,
}

impl Collector<'_> {
    fn push(&mut self, module: &str, name: &str, analytic: &Tensor<f64>, numeric: &Tensor<f64>) {
        let analytic = if self.opts.corrupt.as_deref() == Some(name) { analytic.scale(-1.0) } else { analytic.clone() };
        let err = normwise_error(&analytic, numeric);
        self.entries.push(GradcheckEntry {
            module: module.into(),
            name: name.into(),
            max_rel_error: err,
            pass: err <= GRADCHECK_TOLERANCE,
        });
    }
}

/// Random tiny scene: points inside the polar grid, a camera volume and
/// random truth labels.
fn tiny_inputs(model: &Model, rng: &mut ChaCha8Rng) -> Result<(PreparedInput<f64>, SemanticGrid)> {
    let cfg = &model.cfg;
    let p = &cfg.grid.polar;
    let points = (0..48)
        .map(|_| {
            let r = rng.random_range(p.r_range[0]..p.r_range[1]);
            let t = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let z = rng.random_range(p.z_range[0]..p.z_range[1]);
            LidarPoint::new(r * t.cos(), r * t.sin(), z, rng.random_range(0.0..1.0))
        })
        .collect();
    let [a, b, c] = model.input_grid.bins();
    let cam = model
        .fused()
        .then(|| FeatureVolume::from_data(model.input_grid.clone(), random(&[a, b, c, cfg.channels], rng)))
        .transpose()?;
    let input = model.prepare(&PointCloud::new(points), cam.as_ref())?;
    let labels = (0..cfg.grid.output.num_voxels()).map(|_| rng.random_range(0..cfg.n_classes as u16)).collect();
    Ok((input, SemanticGrid::new(cfg.grid.output.clone(), cfg.n_classes, labels)?))
}

/// Unit-max copy of `x`, so module checks run on well-scaled inputs even
/// where the seeded network attenuates the signal.
fn unit_max(x: &Tensor<f64>) -> Tensor<f64> {
    let m = x.max_abs();
    if m > 0.0 {
        x.scale(1.0 / m)
    } else {
        x.clone()
    }
}

/// Checks each module's parameters and inputs on that module's actual input
/// from a forward pass (rescaled to unit max) against a random linear
/// readout, then the whole pipeline along one random parameter direction.
pub fn gradcheck_all(cfg: &ModelConfig, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if opts.steps.is_empty() || opts.steps.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
        return Err(crate::error::Error::config("gradcheck steps must be positive and finite"));
    }
    let mut entries: Vec<GradcheckEntry> = Vec::new();
    for &step in &opts.steps {
        let run = check_at(cfg, seed, opts, step)?;
        if entries.is_empty() {
            entries = run;
            continue;
        }
        for (best, e) in entries.iter_mut().zip(run) {
            if e.max_rel_error < best.max_rel_error {
                *best = e;
            }
        }
    }
    let passed = entries.iter().all(|e| e.pass);
    Ok(GradcheckReport { tolerance: GRADCHECK_TOLERANCE, entries, passed })
}

fn check_at(cfg: &ModelConfig, seed: u64, opts: &GradcheckOptions, step: f64) -> Result<Vec<GradcheckEntry>> {
    let model = Model::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ParamStore::<f64>::init(cfg, seed);
    let (input, truth) = tiny_inputs(&model, &mut rng)?;
    let mut col = Collector { opts, entries: Vec::new() };
    let tape = model.forward_taped(&input, &params)?;
    let pad = model.input_grid.padding();
    let h = Some(step);
    let fd = |f: &dyn Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>| finite_diff_grad(f, x, h);

    // stem: relu(conv3d(x, k)) on a dense input; empty voxels of a real
    // cloud sit exactly on the relu kink
    let x = &random(tape.input.shape(), &mut rng);
    let r = random(tape.stem_pre.shape(), &mut rng);
    let stem = |x: &Tensor<f64>, k: &Tensor<f64>| dot(&relu(&conv3d(x, k, pad).unwrap()), &r);
    let g_pre = relu_backward(&conv3d(x, &params.stem, pad)?, &r)?;
    let (gx, gk) = conv3d_backward(x, &params.stem, pad, &g_pre)?;
    col.push("stem", "stem.kernel", &gk, &fd(&|k| stem(x, k), &params.stem)?);
    col.push("stem", "stem.input", &gx, &fd(&|x| stem(x, &params.stem), x)?);

    if let (Some(fp), Some(cam)) = (&params.fusion, &input.camera) {
        let fl = unit_max(&tape.lidar);
        let r = random(tape.fused.shape(), &mut rng);
        let fuse = |fl: &Tensor<f64>, fc: &Tensor<f64>, p: &FusionParams<f64>| dot(&modal_fuse(fl, fc, p, pad).unwrap().0, &r);
        let (_, gate) = modal_fuse(&fl, cam, fp, pad)?;
        let (gl, gc, gp) = modal_fuse_backward(&fl, cam, fp, pad, &gate, &r)?;
        let nk = fd(&|k| fuse(&fl, cam, &FusionParams { gate_kernel: k.clone(), gate_bias: fp.gate_bias.clone() }), &fp.gate_kernel)?;
        let nb = fd(&|b| fuse(&fl, cam, &FusionParams { gate_kernel: fp.gate_kernel.clone(), gate_bias: b.clone() }), &fp.gate_bias)?;
        col.push("fusion", "fusion.gate_kernel", &gp.gate_kernel, &nk);
        col.push("fusion", "fusion.gate_bias", &gp.gate_bias, &nb);
        col.push("fusion", "fusion.input_lidar", &gl, &fd(&|x| fuse(x, cam, fp), &fl)?);
        col.push("fusion", "fusion.input_camera", &gc, &fd(&|x| fuse(&fl, x, fp), cam)?);
    }

    let stack = cfg.stack();
    let xb = unit_max(&tape.fused);
    let r = random(tape.backbone_out.shape(), &mut rng);
    let bb = |x: &Tensor<f64>, blocks: &[BlockKernels<f64>]| {
        dot(&backbone_forward(x, blocks, &stack, &cfg.schedule, pad).unwrap(), &r)
    };
    let (_, bt) = backbone_forward_taped(&xb, &params.blocks, &stack, &cfg.schedule, pad)?;
    let (gb, gblocks) = backbone_backward_taped(&bt, &params.blocks, &stack, &cfg.schedule, pad, &r)?;
    for (s, (block, gblock)) in params.blocks.iter().zip(&gblocks).enumerate() {
        for (id, k) in block.iter() {
            let n = fd(
                &|t| {
                    let mut blocks = params.blocks.clone();
                    *blocks[s].get_mut(id).expect("kernel present") = t.clone();
                    bb(&xb, &blocks)
                },
                k,
            )?;
            col.push("backbone", &format!("backbone.{s}.{}", id.name()), gblock.get(id)?, &n);
        }
    }
    col.push("backbone", "backbone.input", &gb, &fd(&|x| bb(x, &params.blocks), &xb)?);

    if let Some(gp) = &params.grp {
        let gcfg = cfg.grp_config();
        let xg = unit_max(&tape.backbone_out);
        let r = random(tape.backbone_out.shape(), &mut rng);
        let grp = |x: &Tensor<f64>, p: &GrpParams<f64>| dot(&grp_forward(x, &model.working_grid, p, &gcfg).unwrap(), &r);
        let (gx, gparams) = grp_backward(&xg, &model.working_grid, gp, &gcfg, &r)?;
        for (j, (name, analytic)) in gparams.named().into_iter().enumerate() {
            let n = fd(
                &|t| {
                    let mut p = gp.clone();
                    *p.named_mut()[j].1 = t.clone();
                    grp(&xg, &p)
                },
                gp.named()[j].1,
            )?;
            col.push("grp", &format!("grp.{name}"), analytic, &n);
        }
        col.push("grp", "grp.input", &gx, &fd(&|x| grp(x, gp), &xg)?);
    }

    let xs = random(&[model.working_grid.bins(), [cfg.channels, 0, 0]].concat()[..4], &mut rng);
    let r = random(tape.cart.shape(), &mut rng);
    let gs = model.plan.backward(&r)?;
    col.push("resample", "resample.input", &gs, &fd(&|x| dot(&model.plan.apply(x).unwrap(), &r), &xs)?);

    let xh = unit_max(&tape.cart);
    let r = random(tape.logits.shape(), &mut rng);
    let head = |x: &Tensor<f64>, p: &HeadParams<f64>| dot(&classify(x, p).unwrap().0, &r);
    let (gf, ghead) = classify_backward(&xh, &params.head, &r)?;
    let hp = &params.head;
    let nw = fd(&|w| head(&xh, &HeadParams { weight: w.clone(), bias: hp.bias.clone() }), &hp.weight)?;
    let nb = fd(&|b| head(&xh, &HeadParams { weight: hp.weight.clone(), bias: b.clone() }), &hp.bias)?;
    col.push("head", "head.weight", &ghead.weight, &nw);
    col.push("head", "head.bias", &ghead.bias, &nb);
    col.push("head", "head.input", &gf, &fd(&|x| head(x, hp), &xh)?);

    let weights = cfg.class_weights();
    let (_, gl) = cross_entropy_loss(&tape.logits, &truth.labels, &weights)?;
    let nl = fd(&|x| cross_entropy_loss(x, &truth.labels, &weights).unwrap().0, &tape.logits)?;
    col.push("loss", "loss.input", &gl, &nl);

    // whole pipeline: directional derivative along a random direction
    let (_, grads) = model.loss_and_grad(&input, &truth, &params)?;
    let dir: Vec<Tensor<f64>> = params.named().iter().map(|(_, t)| random(t.shape(), &mut rng)).collect();
    let analytic: f64 = grads.named().iter().zip(&dir).map(|((_, g), d)| dot(g, d)).sum();
    let along = |t: f64| {
        let mut p = params.clone();
        for ((_, w), d) in p.named_mut().into_iter().zip(&dir) {
            w.axpy(t, d).expect("same shapes");
        }
        model.loss(&input, &truth, &p).unwrap_or(f64::NAN)
    };
    let numeric = (along(step) - along(-step)) / (2.0 * step);
    col.push(
        "pipeline",
        "pipeline.directional",
        &Tensor::from_f64(&[1], &[analytic])?,
        &Tensor::from_f64(&[1], &[numeric])?,
    );

    Ok(col.entries)
}
