//! On-disk scene directories as written by `pvo synth`:
//! `scene_NNNN.json`, `cloud_NNNN.csv`, `truth_NNNN.sem`, `camera_NNNN.arr`.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::Context;
use pvo::head::{read_labels_from, SemanticGrid};
use pvo::pipeline::{ModelConfig, Sample};
use pvo::synth::SceneSpec;
use pvo::tensor::read_array;
use pvo::voxelize::PointCloud;
use pvo::Volume;

use crate::UsageError;

pub fn scene_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("scene_{i:04}.json"))
}

pub fn cloud_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("cloud_{i:04}.csv"))
}

pub fn truth_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("truth_{i:04}.sem"))
}

pub fn camera_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("camera_{i:04}.arr"))
}

/// Scene indices present in `dir`, ascending.
pub fn list_scenes(dir: &Path) -> anyhow::Result<Vec<usize>> {
    let entries = std::fs::read_dir(dir).with_context(|| format!("reading data directory {}", dir.display()))?;
    let mut ids = Vec::new();
    for e in entries {
        let name = e?.file_name();
        let name = name.to_string_lossy();
        if let Some(id) = name.strip_prefix("scene_").and_then(|s| s.strip_suffix(".json")) {
            if let Ok(i) = id.parse() {
                ids.push(i);
            }
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

fn mismatch(key: &str, detail: String) -> anyhow::Error {
    UsageError(format!("config/data mismatch at key `{key}`: {detail}")).into()
}

fn input_grid_key(cfg: &ModelConfig) -> &'static str {
    if cfg.input_grid().is_polar() {
        "grid.polar.bins"
    } else {
        "grid.cartesian.bins"
    }
}

/// Loads one scene and checks it against `cfg`. The camera volume is read
/// only when `camera` is set.
pub fn load_sample(dir: &Path, i: usize, cfg: &ModelConfig, camera: bool) -> anyhow::Result<(Sample, Option<Volume>)> {
    let sp = scene_path(dir, i);
    let scene = SceneSpec::load(&sp).with_context(|| format!("loading {}", sp.display()))?;
    let cp = cloud_path(dir, i);
    let cloud = PointCloud::load(&cp).with_context(|| format!("loading {}", cp.display()))?;

    let tp = truth_path(dir, i);
    let mut r = BufReader::new(File::open(&tp).with_context(|| format!("opening {}", tp.display()))?);
    let (extents, labels) = read_labels_from(&mut r).with_context(|| format!("reading {}", tp.display()))?;
    if extents != cfg.grid.output.bins {
        return Err(mismatch(
            "grid.output.bins",
            format!("{} has extents {extents:?}, config has {:?}", tp.display(), cfg.grid.output.bins),
        ));
    }
    if let Some(max) = labels.iter().max().filter(|m| **m as usize >= cfg.n_classes) {
        return Err(mismatch(
            "n_classes",
            format!("{} holds label {max}, config has {} classes", tp.display(), cfg.n_classes),
        ));
    }
    let truth = SemanticGrid::new(cfg.grid.output.clone(), cfg.n_classes, labels)?;

    let cam = if camera {
        let ap = camera_path(dir, i);
        let a = read_array::<f64>(&ap).with_context(|| format!("loading {}", ap.display()))?;
        let grid = cfg.input_grid();
        if a.rank() != 4 || a.shape()[..3] != grid.bins() {
            return Err(mismatch(
                input_grid_key(cfg),
                format!("{} has shape {:?}, input grid is {:?}", ap.display(), a.shape(), grid.bins()),
            ));
        }
        if a.shape()[3] != cfg.channels {
            return Err(mismatch(
                "channels",
                format!("{} has {} channels, config has {}", ap.display(), a.shape()[3], cfg.channels),
            ));
        }
        Some(Volume::from_data(grid, a)?)
    } else {
        None
    };
    Ok((Sample { scene, cloud, truth }, cam))
}

/// All scenes of `dir`; an empty directory is an error.
pub fn load_all(dir: &Path, cfg: &ModelConfig, camera: bool) -> anyhow::Result<Vec<(Sample, Option<Volume>)>> {
    let ids = list_scenes(dir)?;
    if ids.is_empty() {
        return Err(UsageError(format!("no scenes in {}", dir.display())).into());
    }
    ids.iter().map(|&i| load_sample(dir, i, cfg, camera)).collect()
}
