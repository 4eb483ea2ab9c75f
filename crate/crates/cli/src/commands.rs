use std::fs;
use std::path::Path;

use anyhow::Context;
use pvo::geometry::GridSpec;
use pvo::head::{argmax, SemanticGrid};
use pvo::metrics::confusion_csv;
use pvo::pipeline::{
    ablation_markdown, gradcheck_all, scene_seeds, Dataset, Evaluation, GradcheckOptions, Model, ModelConfig,
    ParamStore, Sample,
};
use pvo::synth::{synthesize_camera_on, CLASS_NAMES};
use pvo::tensor::{read_array, write_array};
use pvo::voxelize::{density_spread, occupancy_histogram, RangeBand};
use pvo::{Scalar, Tensor, Volume};
use rayon::prelude::*;
use serde::Serialize;

use crate::data;
use crate::manifest::{beside, write_atomic, ManifestBuilder};
use crate::{Global, Precision, UsageError};

type Outcome = anyhow::Result<bool>;

fn load_config(g: &Global, preset: fn() -> ModelConfig) -> anyhow::Result<ModelConfig> {
    let mut cfg = match &g.config {
        Some(p) => ModelConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => preset(),
    };
    for o in &g.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| UsageError(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_out(g: &Global) -> anyhow::Result<&Path> {
    g.out.as_deref().ok_or_else(|| UsageError("--out is required for this command".into()).into())
}

fn require_bands(n: usize) -> anyhow::Result<()> {
    if n == 0 {
        return Err(UsageError("--bands must be at least 1".into()).into());
    }
    Ok(())
}

fn start(name: &str, g: &Global, cfg: &ModelConfig) -> ManifestBuilder {
    ManifestBuilder::start(name, g.config.as_deref(), cfg.seed, g.threads)
}

fn json_line<S: Serialize>(v: &S) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn load_params<T: Scalar>(cfg: &ModelConfig, checkpoint: Option<&Path>) -> anyhow::Result<ParamStore<T>> {
    Ok(match checkpoint {
        Some(p) => ParamStore::load(cfg, p).with_context(|| format!("loading checkpoint {}", p.display()))?,
        None => ParamStore::init(cfg, cfg.seed),
    })
}

pub fn synth(g: &Global, scenes: usize) -> Outcome {
    let cfg = load_config(g, ModelConfig::desk)?;
    let dir = require_out(g)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut manifest = start("synth", g, &cfg);
    let samples: Vec<Sample> = scene_seeds(cfg.seed, scenes).par_iter().map(|s| Sample::generate(&cfg, *s)).collect();
    let grid = cfg.input_grid();
    for (i, s) in samples.iter().enumerate() {
        let cam: Volume = synthesize_camera_on(&s.scene, &grid, cfg.channels, s.scene.seed);
        let paths = [data::scene_path(dir, i), data::cloud_path(dir, i), data::truth_path(dir, i), data::camera_path(dir, i)];
        s.scene.save(&paths[0])?;
        s.cloud.save(&paths[1])?;
        s.truth.save(&paths[2])?;
        write_array(&paths[3], &cam.data)?;
        for p in &paths {
            manifest.output(p);
        }
    }
    manifest.finish(&dir.join("manifest.json"))?;
    println!("wrote {scenes} scene(s) to {}", dir.display());
    Ok(true)
}

/// Labels from logits that are the one-hot encoding of `truth`.
fn oracle_prediction(truth: &SemanticGrid) -> anyhow::Result<SemanticGrid> {
    let k = truth.n_classes;
    let [x, y, z] = truth.extents();
    let logits = Tensor::<f64>::from_fn(&[x, y, z, k], |i| f64::from(u8::from(truth.labels[i / k] as usize == i % k)));
    let labels = logits.data().chunks_exact(k).map(|row| argmax(row) as u16).collect();
    Ok(SemanticGrid::new(truth.spec.clone(), k, labels)?)
}

pub fn run(
    g: &Global,
    dir: &Path,
    checkpoint: Option<&Path>,
    bands: usize,
    confusion: Option<&Path>,
    oracle: bool,
    precision: Precision,
) -> Outcome {
    match precision {
        Precision::F32 => run_as::<f32>(g, dir, checkpoint, bands, confusion, oracle),
        Precision::F64 => run_as::<f64>(g, dir, checkpoint, bands, confusion, oracle),
    }
}

fn run_as<T: Scalar>(
    g: &Global,
    dir: &Path,
    checkpoint: Option<&Path>,
    bands: usize,
    confusion: Option<&Path>,
    oracle: bool,
) -> Outcome {
    let cfg = load_config(g, ModelConfig::desk)?;
    let out = require_out(g)?;
    require_bands(bands)?;
    let mut manifest = start("run", g, &cfg);
    let model = Model::new(&cfg)?;
    let samples = data::load_all(dir, &cfg, model.fused() && !oracle)?;
    manifest.input(dir);
    let params = load_params::<T>(&cfg, checkpoint)?;
    if let Some(p) = checkpoint {
        manifest.input(p);
    }
    let preds: Vec<SemanticGrid> = samples
        .par_iter()
        .map(|(s, cam)| {
            if oracle {
                return oracle_prediction(&s.truth);
            }
            let cam = cam.as_ref().map(cast_volume::<T>);
            Ok(model.forward(&model.prepare(&s.cloud, cam.as_ref())?, &params)?.1)
        })
        .collect::<anyhow::Result<_>>()?;
    let mut eval = Evaluation::new(&cfg.grid.output, cfg.n_classes, bands)?;
    for (p, (s, _)) in preds.iter().zip(&samples) {
        eval.add(p, &s.truth)?;
    }
    let report = eval.report();
    write_atomic(out, json_line(&report)?.as_bytes())?;
    manifest.output(out);
    if let Some(c) = confusion {
        write_atomic(c, confusion_csv(&eval.table, &CLASS_NAMES).as_bytes())?;
        manifest.output(c);
    }
    manifest.finish(&beside(out))?;
    println!("{} scene(s): IoU {:.4}, mIoU {:.4}", samples.len(), report.iou, report.miou);
    Ok(true)
}

fn cast_volume<T: Scalar>(v: &Volume) -> pvo::voxelize::FeatureVolume<T> {
    let data = Tensor::from_fn(v.data.shape(), |i| T::lit(v.data.data()[i]));
    pvo::voxelize::FeatureVolume { grid: v.grid.clone(), data, mask: v.mask.clone() }
}

pub fn train(g: &Global, dir: Option<&Path>, log: Option<&Path>, precision: Precision) -> Outcome {
    match precision {
        Precision::F32 => train_as::<f32>(g, dir, log),
        Precision::F64 => train_as::<f64>(g, dir, log),
    }
}

fn train_as<T: Scalar>(g: &Global, dir: Option<&Path>, log: Option<&Path>) -> Outcome {
    let cfg = load_config(g, ModelConfig::desk)?;
    let out = require_out(g)?;
    let mut manifest = start("train", g, &cfg);
    let samples: Vec<Sample> = match dir {
        Some(d) => {
            manifest.input(d);
            data::load_all(d, &cfg, false)?.into_iter().map(|(s, _)| s).collect()
        }
        None => Dataset::generate(&cfg, cfg.seed).train,
    };
    let model = Model::new(&cfg)?;
    let mut params = ParamStore::<T>::init(&cfg, cfg.seed);
    let record = pvo::pipeline::train(&model, &samples, &mut params)?;
    params.save(out)?;
    manifest.output(out);
    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.jsonl");
        s.into()
    });
    write_atomic(&log_path, record.to_jsonl().as_bytes())?;
    manifest.output(&log_path);
    manifest.finish(&beside(out))?;
    if let (Some(a), Some(b)) = (record.first_loss(), record.last_loss()) {
        println!("{} step(s) on {} scene(s): loss {a:.4} -> {b:.4}", record.records.len(), samples.len());
    }
    Ok(true)
}

pub fn ablate(g: &Global, csv_path: Option<&Path>, precision: Precision) -> Outcome {
    let cfg = load_config(g, ModelConfig::desk)?;
    let mut manifest = start("ablate", g, &cfg);
    let data = Dataset::generate(&cfg, cfg.seed);
    let rows = match precision {
        Precision::F32 => pvo::pipeline::ablate::<f32>(&cfg, &data)?,
        Precision::F64 => pvo::pipeline::ablate::<f64>(&cfg, &data)?,
    };
    let md = ablation_markdown(&rows);
    print!("{md}");
    if let Some(c) = csv_path {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &rows {
            w.serialize(r)?;
        }
        write_atomic(c, &w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)?;
        manifest.output(c);
    }
    if let Some(out) = &g.out {
        write_atomic(out, md.as_bytes())?;
        manifest.output(out);
        manifest.finish(&beside(out))?;
    }
    Ok(true)
}

pub fn gradcheck(g: &Global, corrupt: Option<String>) -> Outcome {
    let cfg = load_config(g, ModelConfig::tiny)?;
    for (name, bins) in [("grid input", cfg.input_grid().bins()), ("grid.output", cfg.grid.output.bins)] {
        if bins[0] > 4 || bins[1] > 4 || bins[2] > 2 {
            return Err(UsageError(format!("gradcheck needs grids of at most 4×4×2; {name} is {bins:?}")).into());
        }
    }
    let mut manifest = start("gradcheck", g, &cfg);
    let report = gradcheck_all(&cfg, cfg.seed, &GradcheckOptions { corrupt, ..Default::default() })?;
    for (module, err) in report.per_module() {
        let verdict = if err <= report.tolerance { "PASS" } else { "FAIL" };
        println!("{module:<10} {err:.3e} {verdict}");
    }
    for e in report.entries.iter().filter(|e| !e.pass) {
        println!("  failing: {} {:.3e}", e.name, e.max_rel_error);
    }
    if let Some(out) = &g.out {
        write_atomic(out, json_line(&report)?.as_bytes())?;
        manifest.output(out);
        manifest.finish(&beside(out))?;
    }
    Ok(report.passed)
}

#[derive(Serialize)]
struct Density {
    bands: Vec<RangeBand>,
    spread: f64,
}

#[derive(Serialize)]
struct StatsReport {
    scenes: usize,
    polar: Density,
    cartesian: Density,
    range_miou: Vec<pvo::metrics::BandMetrics>,
}

/// Band histogram summed over clouds.
fn pooled_histogram(clouds: &[&pvo::voxelize::PointCloud], grid: &GridSpec, n: usize) -> anyhow::Result<Density> {
    let mut total: Option<Vec<RangeBand>> = None;
    for c in clouds {
        let h = occupancy_histogram(c, grid, n)?;
        match &mut total {
            None => total = Some(h),
            Some(t) => {
                for (a, b) in t.iter_mut().zip(h) {
                    a.points += b.points;
                    a.occupied_voxels += b.occupied_voxels;
                }
            }
        }
    }
    let mut bands = total.unwrap_or_default();
    for b in &mut bands {
        b.points_per_occupied_voxel =
            if b.occupied_voxels > 0 { b.points as f64 / b.occupied_voxels as f64 } else { 0.0 };
    }
    let spread = density_spread(&bands);
    Ok(Density { bands, spread })
}

pub fn stats(g: &Global, dir: Option<&Path>, checkpoint: Option<&Path>, bands: usize) -> Outcome {
    let cfg = load_config(g, ModelConfig::desk)?;
    let out = require_out(g)?;
    require_bands(bands)?;
    let mut manifest = start("stats", g, &cfg);
    let samples: Vec<Sample> = match dir {
        Some(d) => {
            manifest.input(d);
            data::load_all(d, &cfg, false)?.into_iter().map(|(s, _)| s).collect()
        }
        None => {
            let data = Dataset::generate(&cfg, cfg.seed);
            data.train.into_iter().chain(data.val).collect()
        }
    };
    let clouds: Vec<&pvo::voxelize::PointCloud> = samples.iter().map(|s| &s.cloud).collect();
    let polar = pooled_histogram(&clouds, &GridSpec::Polar(cfg.grid.polar.clone()), bands)?;
    let cartesian = pooled_histogram(&clouds, &GridSpec::Cartesian(cfg.grid.cartesian.clone()), bands)?;
    let model = Model::new(&cfg)?;
    let params = load_params::<f64>(&cfg, checkpoint)?;
    if let Some(p) = checkpoint {
        manifest.input(p);
    }
    let eval = pvo::pipeline::evaluate(&model, &params, &samples, bands)?;
    let report = StatsReport { scenes: samples.len(), polar, cartesian, range_miou: eval.report().bands };
    write_atomic(out, json_line(&report)?.as_bytes())?;
    manifest.output(out);
    manifest.finish(&beside(out))?;
    println!(
        "density spread over {bands} bands: polar {:.3}, cartesian {:.3}",
        report.polar.spread, report.cartesian.spread
    );
    Ok(true)
}

pub fn resample(g: &Global, input: &Path) -> Outcome {
    let cfg = load_config(g, ModelConfig::desk)?;
    let out = require_out(g)?;
    let mut manifest = start("resample", g, &cfg);
    let vol = read_array::<f64>(input).with_context(|| format!("loading {}", input.display()))?;
    manifest.input(input);
    let source = GridSpec::Polar(cfg.grid.polar.clone());
    if vol.rank() != 4 || vol.shape()[..3] != source.bins() {
        return Err(UsageError(format!(
            "config/data mismatch at key `grid.polar.bins`: {} has shape {:?}, grid is {:?}",
            input.display(),
            vol.shape(),
            source.bins()
        ))
        .into());
    }
    let res = pvo::head::polar_to_cartesian_grid(&vol, &source, &cfg.grid.output)?;
    write_array(out, &res)?;
    manifest.output(out);
    manifest.finish(&beside(out))?;
    Ok(true)
}
