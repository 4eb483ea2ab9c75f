//! Synthetic dataset, AdamW training loop, evaluation and the component
//! ablation.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{GridMode, Model, ModelConfig, ParamStore, PreparedInput};
use crate::error::{Error, Result};
use crate::geometry::{CartesianGridSpec, GridSpec};
use crate::head::SemanticGrid;
use crate::metrics::{band_metrics, voxel_bands, ConfusionTable, MetricReport};
use crate::scalar::Scalar;
use crate::synth::{random_scene, rasterize_truth, simulate_lidar, synthesize_camera_on, SceneSpec, CLASS_NAMES};
use crate::tensor::Tensor;
use crate::voxelize::PointCloud;

/// One synthetic scene with its sensor data and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub scene: SceneSpec,
    pub cloud: PointCloud,
    pub truth: SemanticGrid,
}

impl Sample {
    pub fn generate(cfg: &ModelConfig, scene_seed: u64) -> Self {
        let scene = random_scene(scene_seed, &cfg.grid.output);
        let lidar = &cfg.data.lidar;
        let cloud = simulate_lidar(&scene, lidar.n_beams, lidar.points_per_beam, scene_seed);
        let truth = rasterize_truth(&scene, &cfg.grid.output);
        Sample { scene, cloud, truth }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// The first `n` scene seeds of the stream seeded with `seed`.
pub fn scene_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random()).collect()
}

impl Dataset {
    /// Training scenes take the first seeds of [`scene_seeds`], validation
    /// scenes the rest.
    pub fn generate(cfg: &ModelConfig, seed: u64) -> Self {
        let seeds = scene_seeds(seed, cfg.data.train_scenes + cfg.data.val_scenes);
        let mut all: Vec<Sample> = seeds.par_iter().map(|s| Sample::generate(cfg, *s)).collect();
        let val = all.split_off(cfg.data.train_scenes);
        Dataset { train: all, val }
    }
}

impl Model {
    /// Network input for a sample; the camera volume is synthesized from the
    /// scene when fusion is on.
    pub fn prepare_sample<T: Scalar>(&self, sample: &Sample) -> Result<PreparedInput<T>> {
        let cam = self
            .fused()
            .then(|| synthesize_camera_on::<T>(&sample.scene, &self.input_grid, self.cfg.channels, sample.scene.seed));
        self.prepare(&sample.cloud, cam.as_ref())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: &super::OptimizerConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (lr, wd, eps) = (T::lit(self.lr), T::lit(self.weight_decay), T::lit(self.eps));
        let (c1, c2) = (T::lit(c1), T::lit(c2));
        let grads = grads.named();
        for (i, (_, p)) in params.named_mut().into_iter().enumerate() {
            let g = grads[i].1.data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + eps) + wd * *w;
                *w -= lr * update;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("records serialize"));
            s.push('\n');
        }
        s
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

/// Runs `cfg.optimizer.steps` AdamW steps, cycling through `samples` one
/// scene per step. The logged loss is the loss before each step's update.
pub fn train<T: Scalar>(model: &Model, samples: &[Sample], params: &mut ParamStore<T>) -> Result<TrainLog> {
    if samples.is_empty() {
        return Err(Error::config("training needs at least one scene"));
    }
    let inputs: Vec<PreparedInput<T>> = samples.iter().map(|s| model.prepare_sample(s)).collect::<Result<_>>()?;
    let mut opt = AdamW::new(&model.cfg.optimizer, params);
    let mut log = TrainLog::default();
    for step in 0..model.cfg.optimizer.steps {
        let k = step % samples.len();
        let (loss, grads) = model.loss_and_grad(&inputs[k], &samples[k].truth, params)?;
        let grad_norm = grads.norm();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training state at step {step} (scene {k}): loss {loss}, gradient norm {grad_norm}"
            )));
        }
        log.records.push(LogRecord { step, loss, grad_norm });
        opt.step(params, &grads);
    }
    Ok(log)
}

/// Confusion tables of a model over a set of scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub table: ConfusionTable,
    /// One table per range band of the output grid.
    pub bands: Vec<ConfusionTable>,
    pub band_extent: [f64; 2],
    voxel_band: Vec<usize>,
}

impl Evaluation {
    pub fn new(output: &CartesianGridSpec, n_classes: usize, n_bands: usize) -> Result<Self> {
        let (voxel_band, band_extent) = voxel_bands(&GridSpec::Cartesian(output.clone()), n_bands)?;
        Ok(Evaluation {
            table: ConfusionTable::new(n_classes),
            bands: vec![ConfusionTable::new(n_classes); n_bands],
            band_extent,
            voxel_band,
        })
    }

    /// Adds one predicted scene.
    pub fn add(&mut self, pred: &SemanticGrid, truth: &SemanticGrid) -> Result<()> {
        self.table.accumulate(pred, truth)?;
        if pred.labels.len() != self.voxel_band.len() {
            return Err(Error::data("prediction grid differs from the evaluation grid"));
        }
        for ((p, t), b) in pred.labels.iter().zip(&truth.labels).zip(&self.voxel_band) {
            self.bands[*b].add(*t as usize, *p as usize, 1);
        }
        Ok(())
    }

    pub fn report(&self) -> MetricReport {
        MetricReport::new(&self.table, &CLASS_NAMES, band_metrics(&self.bands, self.band_extent))
    }
}

/// Predicts every scene (in parallel) and accumulates in scene order.
pub fn evaluate<T: Scalar>(model: &Model, params: &ParamStore<T>, samples: &[Sample], n_bands: usize) -> Result<Evaluation> {
    let mut eval = Evaluation::new(&model.cfg.grid.output, model.cfg.n_classes, n_bands)?;
    let preds: Vec<SemanticGrid> = samples
        .par_iter()
        .map(|s| Ok(model.forward(&model.prepare_sample::<T>(s)?, params)?.1))
        .collect::<Result<_>>()?;
    for (p, s) in preds.iter().zip(samples) {
        eval.add(p, &s.truth)?;
    }
    Ok(eval)
}

/// The component rows in table order: `(name, polar, grp, pd_conv)`.
pub const ABLATION_ROWS: [(&str, bool, bool, bool); 5] = [
    ("none", false, false, false),
    ("polar", true, false, false),
    ("polar+grp", true, true, false),
    ("polar+pd", true, false, true),
    ("polar+grp+pd", true, true, true),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub polar: bool,
    pub grp: bool,
    pub pd_conv: bool,
    pub params: usize,
    pub final_loss: f64,
    pub iou: f64,
    pub miou: f64,
}

impl ModelConfig {
    /// Copy of `self` with the component toggles of one ablation row.
    pub fn with_components(&self, polar: bool, grp: bool, pd_conv: bool) -> Self {
        let mut c = self.clone();
        c.grid.mode = if polar { GridMode::Polar } else { GridMode::Cartesian };
        c.grp.enable = grp;
        c.pdconv.enable = pd_conv;
        c
    }
}

/// Trains every row from the same seed and budget on `data.train` and
/// scores it on `data.val`.
pub fn ablate<T: Scalar>(base: &ModelConfig, data: &Dataset) -> Result<Vec<AblationRow>> {
    ABLATION_ROWS
        .iter()
        .map(|&(name, polar, grp, pd)| {
            let cfg = base.with_components(polar, grp, pd);
            let model = Model::new(&cfg)?;
            let mut params = ParamStore::<T>::init(&cfg, cfg.seed);
            let log = train(&model, &data.train, &mut params)?;
            let report = evaluate(&model, &params, &data.val, 1)?.report();
            Ok(AblationRow {
                name: name.to_string(),
                polar,
                grp,
                pd_conv: pd,
                params: params.num_params(),
                final_loss: log.last_loss().unwrap_or(f64::NAN),
                iou: report.iou,
                miou: report.miou,
            })
        })
        .collect()
}

/// Markdown table with one check column per component.
pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "✓" } else { "" };
    let mut s = String::from("| Polar | GRP | PD-Conv | IoU | mIoU |\n|:---:|:---:|:---:|---:|---:|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.2} | {:.2} |",
            mark(r.polar),
            mark(r.grp),
            mark(r.pd_conv),
            100.0 * r.iou,
            100.0 * r.miou
        );
    }
    s
}
