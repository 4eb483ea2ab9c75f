//! End-to-end occupancy model: voxelize, stem, optional camera fusion,
//! plane-decomposed backbone, optional global propagation, trilinear
//! resampling to the Cartesian output grid and a per-voxel classifier.
//!
//! Multi-scale aggregation is the identity: the head reads the last
//! backbone stage directly.

mod gradcheck;
mod train;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use gradcheck::{
    gradcheck_all, GradcheckEntry, GradcheckOptions, GradcheckReport, GRADCHECK_TOLERANCE};
pub use train::{
    ablate, ablation_markdown, evaluate, scene_seeds, train, AblationRow, AdamW, Dataset, Evaluation, LogRecord, Sample,
    TrainLog, ABLATION_ROWS,
};

use crate::error::{Error, Result};
use crate::fusion::{modal_fuse, modal_fuse_backward, FusionMode, FusionParams};
use crate::geometry::{CartesianGridSpec, GridSpec, PolarGridSpec};
use crate::grp::{grp_backward_taped, grp_forward_taped, GrpConfig, GrpParams, GrpTape};
use crate::head::{classify, classify_backward, cross_entropy_loss, HeadParams, ResamplePlan, SemanticGrid, FREE};
use crate::pdconv::{
    backbone_backward_taped, backbone_forward_taped, stage_extents, BackboneTape, BlockKernels, KernelId,
    PdStackConfig, Topology,
};
use crate::scalar::Scalar;
use crate::tensor::{conv3d, conv3d_backward, read_arrays, relu, relu_backward, write_arrays, Tensor};
use crate::voxelize::{voxelize_points, FeatureVolume, PointCloud, POINT_FEATURES};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    #[default]
    Polar,
    /// Cartesian working grid with the polar grid's bin counts.
    Cartesian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub mode: GridMode,
    pub polar: PolarGridSpec,
    /// Working grid in Cartesian mode.
    pub cartesian: CartesianGridSpec,
    pub output: CartesianGridSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdConvToggle {
    /// When off, every block is a single full 3×3×3 kernel.
    pub enable: bool,
    pub topology: Topology,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpToggle {
    pub enable: bool,
    pub window_s: usize,
    #[serde(default)]
    pub literal_eq: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { lr: 0.01, steps: 200, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarConfig {
    pub n_beams: usize,
    pub points_per_beam: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub lidar: LidarConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid: GridConfig,
    /// Feature width `C` after the stem.
    pub channels: usize,
    /// Pooling stride after each backbone block.
    pub schedule: Vec<[usize; 3]>,
    pub pdconv: PdConvToggle,
    pub grp: GrpToggle,
    pub fusion: FusionConfig,
    pub n_classes: usize,
    /// Loss weight of the free class; occupied classes weigh 1.
    pub free_weight: f64,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
}

impl ModelConfig {
    /// 64×84×10 polar input, 16×21×5 after the backbone, 64×64×10 output.
    pub fn desk() -> Self {
        let polar = PolarGridSpec::desk();
        let output = CartesianGridSpec::desk();
        let cartesian =
            CartesianGridSpec::new(output.x_range, output.y_range, output.z_range, polar.bins).expect("valid preset");
        ModelConfig {
            grid: GridConfig { mode: GridMode::Polar, polar, cartesian, output },
            channels: 8,
            schedule: vec![[2, 2, 2], [2, 2, 1]],
            pdconv: PdConvToggle { enable: true, topology: Topology::HybridThree },
            grp: GrpToggle { enable: true, window_s: 2, literal_eq: false },
            fusion: FusionConfig { mode: FusionMode::LidarOnly },
            n_classes: crate::synth::N_CLASSES,
            free_weight: 0.2,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            data: DataConfig {
                train_scenes: 16,
                val_scenes: 4,
                lidar: LidarConfig { n_beams: 32, points_per_beam: 1024 },
            },
        }
    }

    /// 4×4×2 polar input for gradient checks; camera fusion on.
    pub fn tiny() -> Self {
        let polar = PolarGridSpec::new([0.5, 2.5], [-1.0, 1.0], [4, 4, 2]).expect("valid preset");
        let output = CartesianGridSpec::new([-2.0, 2.0], [-2.0, 2.0], [-1.0, 1.0], [4, 4, 2]).expect("valid preset");
        let cartesian = output.clone();
        ModelConfig {
            grid: GridConfig { mode: GridMode::Polar, polar, cartesian, output },
            channels: 3,
            schedule: vec![[1, 1, 1], [1, 1, 1]],
            pdconv: PdConvToggle { enable: true, topology: Topology::HybridThree },
            grp: GrpToggle { enable: true, window_s: 2, literal_eq: false },
            fusion: FusionConfig { mode: FusionMode::Fused },
            n_classes: 4,
            free_weight: 0.2,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            data: DataConfig {
                train_scenes: 1,
                val_scenes: 1,
                lidar: LidarConfig { n_beams: 4, points_per_beam: 16 },
            },
        }
    }

    pub fn input_grid(&self) -> GridSpec {
        match self.grid.mode {
            GridMode::Polar => GridSpec::Polar(self.grid.polar.clone()),
            GridMode::Cartesian => GridSpec::Cartesian(self.grid.cartesian.clone()),
        }
    }

    pub fn stack(&self) -> PdStackConfig {
        PdStackConfig::new(if self.pdconv.enable { self.pdconv.topology } else { Topology::Full3d })
    }

    pub fn grp_config(&self) -> GrpConfig {
        GrpConfig { window_s: self.grp.window_s, literal_eq: self.grp.literal_eq }
    }

    pub fn class_weights(&self) -> Vec<f64> {
        (0..self.n_classes).map(|c| if c == FREE as usize { self.free_weight } else { 1.0 }).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.polar.validate()?;
        self.grid.cartesian.validate()?;
        self.grid.output.validate()?;
        if self.channels == 0 {
            return Err(Error::config("channels must be positive"));
        }
        if self.n_classes < 2 || self.n_classes > u16::MAX as usize {
            return Err(Error::config(format!("n_classes must be in [2, 65535], got {}", self.n_classes)));
        }
        if self.schedule.is_empty() {
            return Err(Error::config("schedule needs at least one stage"));
        }
        stage_extents(self.input_grid().bins(), &self.schedule)?;
        if self.grp.window_s == 0 {
            return Err(Error::config("grp.window_s must be positive"));
        }
        if !(self.free_weight >= 0.0) {
            return Err(Error::config("free_weight must be nonnegative"));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0) || !(o.weight_decay >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("optimizer hyperparameters out of range"));
        }
        if self.data.train_scenes == 0 {
            return Err(Error::config("data.train_scenes must be at least 1"));
        }
        Ok(())
    }

    /// Applies a dotted `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn std::fmt::Display| Error::config(format!("{key}: {e}"));
        let flag = |v: &str| v.parse::<bool>().map_err(|e| bad(&e));
        match key {
            "pdconv.topology" => self.pdconv.topology = Topology::from_label(value)?,
            "pdconv.enable" => self.pdconv.enable = flag(value)?,
            "grp.enable" => self.grp.enable = flag(value)?,
            "grp.window_s" => self.grp.window_s = value.parse().map_err(|e| bad(&e))?,
            "grp.literal_eq" => self.grp.literal_eq = flag(value)?,
            "fusion.mode" => {
                self.fusion.mode = serde_json::from_value(serde_json::Value::String(value.into())).map_err(|e| bad(&e))?
            }
            "grid.mode" => {
                self.grid.mode = serde_json::from_value(serde_json::Value::String(value.into())).map_err(|e| bad(&e))?
            }
            "channels" => self.channels = value.parse().map_err(|e| bad(&e))?,
            "seed" => self.seed = value.parse().map_err(|e| bad(&e))?,
            "optimizer.lr" => self.optimizer.lr = value.parse().map_err(|e| bad(&e))?,
            "optimizer.steps" => self.optimizer.steps = value.parse().map_err(|e| bad(&e))?,
            "optimizer.weight_decay" => self.optimizer.weight_decay = value.parse().map_err(|e| bad(&e))?,
            "n_classes" => self.n_classes = value.parse().map_err(|e| bad(&e))?,
            "free_weight" => self.free_weight = value.parse().map_err(|e| bad(&e))?,
            "data.train_scenes" => self.data.train_scenes = value.parse().map_err(|e| bad(&e))?,
            "data.val_scenes" => self.data.val_scenes = value.parse().map_err(|e| bad(&e))?,
            "data.lidar.n_beams" => self.data.lidar.n_beams = value.parse().map_err(|e| bad(&e))?,
            "data.lidar.points_per_beam" => self.data.lidar.points_per_beam = value.parse().map_err(|e| bad(&e))?,
            _ => return Err(Error::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Every learnable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    /// `[1, 1, 1, 10, C]`.
    pub stem: Tensor<T>,
    pub fusion: Option<FusionParams<T>>,
    pub blocks: Vec<BlockKernels<T>>,
    pub grp: Option<GrpParams<T>>,
    pub head: HeadParams<T>,
}

impl<T: Scalar> ParamStore<T> {
    /// Shapes for `cfg` filled by `init(shape)`; biases start at zero.
    fn build(cfg: &ModelConfig, mut init: impl FnMut(&[usize]) -> Tensor<T>) -> Self {
        let c = cfg.channels;
        let stack = cfg.stack();
        ParamStore {
            stem: init(&[1, 1, 1, POINT_FEATURES, c]),
            fusion: (cfg.fusion.mode == FusionMode::Fused).then(|| FusionParams::new(c, &mut init)),
            blocks: cfg.schedule.iter().map(|_| BlockKernels::for_config(&stack, c, c, &mut init)).collect(),
            grp: cfg.grp.enable.then(|| GrpParams::new(c, &mut init)),
            head: HeadParams::new(c, cfg.n_classes, &mut init),
        }
    }

    /// Weights uniform in `±1/√fan_in` (fan-in is every axis but the last),
    /// each tensor from its own seeded stream.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut store = Self::build(cfg, Tensor::zeros);
        for (i, (name, t)) in store.named_mut().into_iter().enumerate() {
            if name.ends_with("bias") {
                continue;
            }
            let shape = t.shape().to_vec();
            let fan_in: usize = shape[..shape.len() - 1].iter().product();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            *t = Tensor::uniform(&shape, 1.0 / (fan_in as f64).sqrt(), &mut rng);
        }
        store
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.fill(T::zero());
        }
        z
    }

    /// Parameters in a fixed order with unique dotted names.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("stem.kernel".to_string(), &self.stem)];
        if let Some(f) = &self.fusion {
            out.push(("fusion.gate_kernel".into(), &f.gate_kernel));
            out.push(("fusion.gate_bias".into(), &f.gate_bias));
        }
        for (s, b) in self.blocks.iter().enumerate() {
            out.extend(b.iter().map(|(id, t)| (format!("backbone.{s}.{}", id.name()), t)));
        }
        if let Some(g) = &self.grp {
            out.extend(g.named().into_iter().map(|(n, t)| (format!("grp.{n}"), t)));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("stem.kernel".to_string(), &mut self.stem)];
        if let Some(f) = &mut self.fusion {
            out.push(("fusion.gate_kernel".into(), &mut f.gate_kernel));
            out.push(("fusion.gate_bias".into(), &mut f.gate_bias));
        }
        for (s, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.iter_mut().map(|(id, t)| (format!("backbone.{s}.{}", id.name()), t)));
        }
        if let Some(g) = &mut self.grp {
            out.extend(g.named_mut().into_iter().map(|(n, t)| (format!("grp.{n}"), t)));
        }
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Global L2 norm over every tensor.
    pub fn norm(&self) -> f64 {
        self.named().iter().flat_map(|(_, t)| t.data()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
    }

    /// Writes the tensors to `path` and their names to `<path>.names.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let named = self.named();
        write_arrays(path.as_ref(), named.iter().map(|(_, t)| *t))?;
        let names: Vec<&str> = named.iter().map(|(n, _)| n.as_str()).collect();
        std::fs::write(names_path(path.as_ref()), serde_json::to_string_pretty(&names)?)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`ParamStore::save`] for `cfg`.
    pub fn load(cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        let arrays: Vec<Tensor<T>> = read_arrays(path.as_ref())?;
        let names: Vec<String> = serde_json::from_str(&std::fs::read_to_string(names_path(path.as_ref()))?)?;
        let mut store = Self::build(cfg, Tensor::zeros);
        let slots = store.named_mut();
        if slots.len() != arrays.len() || names.len() != arrays.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} arrays and {} names, the config needs {}",
                arrays.len(),
                names.len(),
                slots.len()
            )));
        }
        for ((name, slot), (saved, a)) in slots.into_iter().zip(names.iter().zip(arrays)) {
            if name != *saved || slot.shape() != a.shape() {
                return Err(Error::Format(format!(
                    "checkpoint entry {saved} {:?} does not match {name} {:?}",
                    a.shape(),
                    slot.shape()
                )));
            }
            *slot = a;
        }
        Ok(store)
    }
}

fn names_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".names.json");
    PathBuf::from(s)
}

/// Network input for one scene: normalized point features and the camera
/// volume when fusion is on.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedInput<T> {
    pub features: Tensor<T>,
    pub camera: Option<Tensor<T>>,
}

/// Intermediate values of one forward pass.
pub struct ForwardTape<T> {
    input: Tensor<T>,
    stem_pre: Tensor<T>,
    lidar: Tensor<T>,
    gate: Option<Tensor<T>>,
    fused: Tensor<T>,
    backbone: BackboneTape<T>,
    backbone_out: Tensor<T>,
    grp: Option<GrpTape<T>>,
    cart: Tensor<T>,
    pub logits: Tensor<T>,
    pub labels: Vec<u16>,
}

/// A configured model: grids, the resampling plan and per-channel input
/// scaling are derived once from the config.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub input_grid: GridSpec,
    pub working_grid: GridSpec,
    stack: PdStackConfig,
    grp: GrpConfig,
    plan: ResamplePlan,
    feature_scale: [f64; POINT_FEATURES],
    feature_shift: [f64; POINT_FEATURES],
    class_weights: Vec<f64>,
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let input_grid = cfg.input_grid();
        let mut working_grid = input_grid.clone();
        for s in &cfg.schedule {
            working_grid = working_grid.downsampled(*s)?;
        }
        let plan = ResamplePlan::new(&working_grid, &cfg.grid.output);
        let (feature_scale, feature_shift) = feature_normalization(&input_grid);
        Ok(Model {
            cfg: cfg.clone(),
            input_grid,
            working_grid,
            stack: cfg.stack(),
            grp: cfg.grp_config(),
            plan,
            feature_scale,
            feature_shift,
            class_weights: cfg.class_weights(),
        })
    }

    pub fn fused(&self) -> bool {
        self.cfg.fusion.mode == FusionMode::Fused
    }

    /// Voxelizes `pc` and scales the point features to roughly unit range.
    pub fn prepare<T: Scalar>(&self, pc: &PointCloud, camera: Option<&FeatureVolume<T>>) -> Result<PreparedInput<T>> {
        let (vol, _) = voxelize_points::<T>(pc, &self.input_grid);
        let mut features = vol.data;
        for (v, row) in features.data_mut().chunks_exact_mut(POINT_FEATURES).enumerate() {
            if !vol.mask[v] {
                continue;
            }
            for (c, x) in row.iter_mut().enumerate() {
                *x = T::lit((x.as_f64() - self.feature_shift[c]) * self.feature_scale[c]);
            }
        }
        let camera = match (self.fused(), camera) {
            (false, _) => None,
            (true, None) => return Err(Error::config("fusion.mode is fused but no camera volume was given")),
            (true, Some(cam)) => {
                if cam.grid != self.input_grid || cam.channels() != self.cfg.channels {
                    return Err(Error::config(format!(
                        "camera volume {:?} does not match the input grid with {} channels",
                        cam.data.shape(),
                        self.cfg.channels
                    )));
                }
                Some(cam.data.clone())
            }
        };
        Ok(PreparedInput { features, camera })
    }

    pub fn forward_taped<T: Scalar>(&self, input: &PreparedInput<T>, params: &ParamStore<T>) -> Result<ForwardTape<T>> {
        let pad = self.input_grid.padding();
        let stem_pre = conv3d(&input.features, &params.stem, pad)?;
        let lidar = relu(&stem_pre);
        let (fused, gate) = match (&params.fusion, &input.camera) {
            (Some(fp), Some(cam)) => {
                let (f, g) = modal_fuse(&lidar, cam, fp, pad)?;
                (f, Some(g))
            }
            (None, _) => (lidar.clone(), None),
            (Some(_), None) => return Err(Error::config("fusion parameters present but no camera input")),
        };
        let (backbone_out, backbone) = backbone_forward_taped(&fused, &params.blocks, &self.stack, &self.cfg.schedule, pad)?;
        let (working, grp) = match &params.grp {
            Some(gp) => {
                let (y, t) = grp_forward_taped(&backbone_out, &self.working_grid, gp, &self.grp)?;
                (y, Some(t))
            }
            None => (backbone_out.clone(), None),
        };
        let cart = self.plan.apply(&working)?;
        let (logits, labels) = classify(&cart, &params.head)?;
        Ok(ForwardTape {
            input: input.features.clone(),
            stem_pre,
            lidar,
            gate,
            fused,
            backbone,
            backbone_out,
            grp,
            cart,
            logits,
            labels,
        })
    }

    /// Logits on the output grid and their argmax labels.
    pub fn forward<T: Scalar>(&self, input: &PreparedInput<T>, params: &ParamStore<T>) -> Result<(Tensor<T>, SemanticGrid)> {
        let tape = self.forward_taped(input, params)?;
        let grid = SemanticGrid::new(self.cfg.grid.output.clone(), self.cfg.n_classes, tape.labels)?;
        Ok((tape.logits, grid))
    }

    /// Gradients of the loss with respect to every parameter given the
    /// gradient at the logits.
    pub fn backward<T: Scalar>(
        &self,
        input: &PreparedInput<T>,
        params: &ParamStore<T>,
        tape: &ForwardTape<T>,
        grad_logits: &Tensor<T>,
    ) -> Result<ParamStore<T>> {
        let pad = self.input_grid.padding();
        let mut grads = params.zeros_like();
        let (g_cart, g_head) = classify_backward(&tape.cart, &params.head, grad_logits)?;
        grads.head = g_head;
        let mut g = self.plan.backward(&g_cart)?;
        if let (Some(gp), Some(gt)) = (&params.grp, &tape.grp) {
            let (gx, gg) = grp_backward_taped(gt, &self.working_grid, gp, &self.grp, &g)?;
            grads.grp = Some(gg);
            g = gx;
        }
        debug_assert_eq!(g.shape(), tape.backbone_out.shape());
        let (g_fused, g_blocks) =
            backbone_backward_taped(&tape.backbone, &params.blocks, &self.stack, &self.cfg.schedule, pad, &g)?;
        grads.blocks = g_blocks;
        let g_lidar = match (&params.fusion, &input.camera, &tape.gate) {
            (Some(fp), Some(cam), Some(gate)) => {
                let (gl, _, gf) = modal_fuse_backward(&tape.lidar, cam, fp, pad, gate, &g_fused)?;
                grads.fusion = Some(gf);
                gl
            }
            _ => g_fused,
        };
        debug_assert_eq!(tape.fused.shape(), g_lidar.shape());
        let g_pre = relu_backward(&tape.stem_pre, &g_lidar)?;
        let (_, g_stem) = conv3d_backward(&tape.input, &params.stem, pad, &g_pre)?;
        grads.stem = g_stem;
        Ok(grads)
    }

    /// Weighted cross-entropy against `truth` and its parameter gradients.
    pub fn loss_and_grad<T: Scalar>(
        &self,
        input: &PreparedInput<T>,
        truth: &SemanticGrid,
        params: &ParamStore<T>,
    ) -> Result<(f64, ParamStore<T>)> {
        self.check_truth(truth)?;
        let tape = self.forward_taped(input, params)?;
        let (loss, g) = cross_entropy_loss(&tape.logits, &truth.labels, &self.class_weights)?;
        let grads = self.backward(input, params, &tape, &g)?;
        Ok((loss.as_f64(), grads))
    }

    pub fn loss<T: Scalar>(&self, input: &PreparedInput<T>, truth: &SemanticGrid, params: &ParamStore<T>) -> Result<f64> {
        self.check_truth(truth)?;
        let tape = self.forward_taped(input, params)?;
        Ok(cross_entropy_loss(&tape.logits, &truth.labels, &self.class_weights)?.0.as_f64())
    }

    fn check_truth(&self, truth: &SemanticGrid) -> Result<()> {
        if truth.spec != self.cfg.grid.output || truth.n_classes != self.cfg.n_classes {
            return Err(Error::data("truth grid does not match the output grid or class count"));
        }
        Ok(())
    }

    /// Output voxels with no support on the working grid.
    pub fn uncovered(&self) -> usize {
        self.plan.covered().iter().filter(|c| !**c).count()
    }
}

/// End-to-end prediction for one cloud.
pub fn forward<T: Scalar>(
    cfg: &ModelConfig,
    pc: &PointCloud,
    camera: Option<&FeatureVolume<T>>,
    params: &ParamStore<T>,
) -> Result<(Tensor<T>, SemanticGrid)> {
    let model = Model::new(cfg)?;
    model.forward(&model.prepare(pc, camera)?, params)
}

/// Fixed affine map `(v − shift) · scale` for each point feature channel.
fn feature_normalization(grid: &GridSpec) -> ([f64; POINT_FEATURES], [f64; POINT_FEATURES]) {
    use crate::voxelize::{CH_INTENSITY, CH_LOG_COUNT, CH_OFFSET, CH_R, CH_THETA, CH_X, CH_Y, CH_Z};
    let (r_max, z_range, widths) = match grid {
        GridSpec::Polar(p) => (p.r_range[1], p.z_range, p.widths()),
        GridSpec::Cartesian(c) => (c.max_center_radius(), c.z_range, c.widths()),
    };
    let mut scale = [1.0; POINT_FEATURES];
    let mut shift = [0.0; POINT_FEATURES];
    scale[CH_R] = 1.0 / r_max;
    scale[CH_THETA] = 1.0 / std::f64::consts::PI;
    scale[CH_X] = 1.0 / r_max;
    scale[CH_Y] = 1.0 / r_max;
    shift[CH_Z] = 0.5 * (z_range[0] + z_range[1]);
    scale[CH_Z] = 2.0 / (z_range[1] - z_range[0]);
    scale[CH_INTENSITY] = 1.0;
    for d in 0..3 {
        scale[CH_OFFSET + d] = 1.0 / widths[d];
    }
    scale[CH_LOG_COUNT] = 0.25;
    (scale, shift)
}

/// Parameter and multiply counts of the backbone for `cfg`.
pub fn backbone_cost(cfg: &ModelConfig) -> Result<Vec<crate::pdconv::BlockStats>> {
    let input = cfg.input_grid().bins();
    let pooled = stage_extents(input, &cfg.schedule)?;
    // each block runs before its stage's pooling
    let extents = std::iter::once(input).chain(pooled).take(cfg.schedule.len());
    let stack = cfg.stack();
    let params = ParamStore::<f64>::build(cfg, Tensor::zeros);
    params
        .blocks
        .iter()
        .zip(extents)
        .map(|(b, e)| crate::pdconv::block_stats(b, &stack, e))
        .collect()
}

/// Kernels a block of `cfg` holds.
pub fn block_kernels(cfg: &ModelConfig) -> Vec<KernelId> {
    cfg.stack().kernels()
}
