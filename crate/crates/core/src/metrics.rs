//! Confusion tables, geometric IoU, per-class IoU and their range-banded
//! breakdown.
//!
//! Conventions: occupancy IoU is 1 when neither truth nor prediction has an
//! occupied voxel; a class absent from both truth and prediction does not
//! enter the mean, and the mean over no classes is 1.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GridSpec;
use crate::head::{SemanticGrid, FREE};
use crate::voxelize::band_extent;

/// Counts indexed `[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionTable {
    pub n_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionTable {
    pub fn new(n_classes: usize) -> Self {
        ConfusionTable { n_classes, counts: vec![0; n_classes * n_classes] }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize, n: u64) {
        self.counts[truth * self.n_classes + pred] += n;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn check(&self, pred: &SemanticGrid, truth: &SemanticGrid) -> Result<()> {
        if pred.spec != truth.spec {
            return Err(Error::data("prediction and truth grids differ"));
        }
        if pred.n_classes != self.n_classes || truth.n_classes != self.n_classes {
            return Err(Error::data(format!(
                "class counts differ: table {}, prediction {}, truth {}",
                self.n_classes, pred.n_classes, truth.n_classes
            )));
        }
        Ok(())
    }

    pub fn accumulate(&mut self, pred: &SemanticGrid, truth: &SemanticGrid) -> Result<()> {
        self.check(pred, truth)?;
        for (p, t) in pred.labels.iter().zip(&truth.labels) {
            self.add(*t as usize, *p as usize, 1);
        }
        Ok(())
    }

    /// Accumulates only the voxels where `mask` is set.
    pub fn accumulate_masked(&mut self, pred: &SemanticGrid, truth: &SemanticGrid, mask: &[bool]) -> Result<()> {
        self.check(pred, truth)?;
        if mask.len() != truth.labels.len() {
            return Err(Error::data("mask length does not match the grid"));
        }
        for ((p, t), m) in pred.labels.iter().zip(&truth.labels).zip(mask) {
            if *m {
                self.add(*t as usize, *p as usize, 1);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionTable) -> Result<()> {
        if other.n_classes != self.n_classes {
            return Err(Error::data("cannot merge tables of different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn row(&self, c: usize) -> u64 {
        (0..self.n_classes).map(|p| self.get(c, p)).sum()
    }

    fn col(&self, c: usize) -> u64 {
        (0..self.n_classes).map(|t| self.get(t, c)).sum()
    }
}

/// IoU of "occupied" (any non-free class) between truth and prediction.
pub fn geometric_iou(table: &ConfusionTable) -> f64 {
    let free = FREE as usize;
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for t in 0..table.n_classes {
        for p in 0..table.n_classes {
            let n = table.get(t, p);
            match (t != free, p != free) {
                (true, true) => tp += n,
                (false, true) => fp += n,
                (true, false) => fneg += n,
                (false, false) => {}
            }
        }
    }
    let union = tp + fp + fneg;
    if union == 0 {
        1.0
    } else {
        tp as f64 / union as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanIou {
    /// IoU per class; `None` for free space and for classes absent from both
    /// truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn mean_iou(table: &ConfusionTable) -> MeanIou {
    let per_class: Vec<Option<f64>> = (0..table.n_classes)
        .map(|c| {
            if c == FREE as usize {
                return None;
            }
            let d = table.get(c, c);
            let union = table.row(c) + table.col(c) - d;
            (union > 0).then(|| d as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if present.is_empty() { 1.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    MeanIou { per_class, miou }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandMetrics {
    pub band: usize,
    pub r_lo: f64,
    pub r_hi: f64,
    pub voxels: u64,
    pub iou: f64,
    pub miou: f64,
}

/// Band of each voxel of a Cartesian grid by the horizontal radius of its
/// center.
pub fn voxel_bands(grid: &GridSpec, n_bands: usize) -> Result<(Vec<usize>, [f64; 2])> {
    if n_bands == 0 {
        return Err(Error::config("need at least one range band"));
    }
    let [lo, hi] = band_extent(grid);
    let width = (hi - lo) / n_bands as f64;
    let bands = (0..grid.num_voxels())
        .map(|f| {
            let r = grid.center_cart(grid.unflat(f)).bev_radius();
            (((r - lo) / width).floor().max(0.0) as usize).min(n_bands - 1)
        })
        .collect();
    Ok((bands, [lo, hi]))
}

/// Per-band confusion tables.
pub fn banded_tables(pred: &SemanticGrid, truth: &SemanticGrid, n_bands: usize) -> Result<Vec<ConfusionTable>> {
    let (bands, _) = voxel_bands(&GridSpec::Cartesian(truth.spec.clone()), n_bands)?;
    let mut tables = vec![ConfusionTable::new(truth.n_classes); n_bands];
    // validates specs and class counts
    ConfusionTable::new(truth.n_classes).check(pred, truth)?;
    for ((p, t), b) in pred.labels.iter().zip(&truth.labels).zip(&bands) {
        tables[*b].add(*t as usize, *p as usize, 1);
    }
    Ok(tables)
}

/// Metrics per band; bands without voxels are left out.
pub fn band_metrics(tables: &[ConfusionTable], extent: [f64; 2]) -> Vec<BandMetrics> {
    let width = (extent[1] - extent[0]) / tables.len() as f64;
    tables
        .iter()
        .enumerate()
        .filter(|(_, t)| t.total() > 0)
        .map(|(b, t)| BandMetrics {
            band: b,
            r_lo: extent[0] + b as f64 * width,
            r_hi: extent[0] + (b + 1) as f64 * width,
            voxels: t.total(),
            iou: geometric_iou(t),
            miou: mean_iou(t).miou,
        })
        .collect()
}

pub fn range_stratified_miou(pred: &SemanticGrid, truth: &SemanticGrid, n_bands: usize) -> Result<Vec<BandMetrics>> {
    let tables = banded_tables(pred, truth, n_bands)?;
    Ok(band_metrics(&tables, band_extent(&GridSpec::Cartesian(truth.spec.clone()))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iou: f64,
    pub miou: f64,
    pub per_class: serde_json::Map<String, serde_json::Value>,
    pub bands: Vec<BandMetrics>,
}

impl MetricReport {
    pub fn new(table: &ConfusionTable, class_names: &[&str], bands: Vec<BandMetrics>) -> Self {
        let m = mean_iou(table);
        let per_class = m
            .per_class
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != FREE as usize)
            .map(|(c, v)| {
                let name = class_names.get(c).map_or_else(|| format!("class_{c}"), |n| n.to_string());
                (name, v.map_or(serde_json::Value::Null, |v| serde_json::json!(v)))
            })
            .collect();
        MetricReport { iou: geometric_iou(table), miou: m.miou, per_class, bands }
    }

    pub fn bands_csv(&self) -> String {
        let mut s = String::from("band,r_lo,r_hi,voxels,iou,miou\n");
        for b in &self.bands {
            let _ = writeln!(s, "{},{},{},{},{},{}", b.band, b.r_lo, b.r_hi, b.voxels, b.iou, b.miou);
        }
        s
    }
}

/// Confusion table as CSV, truth in rows.
pub fn confusion_csv(table: &ConfusionTable, class_names: &[&str]) -> String {
    let name = |c: usize| class_names.get(c).map_or_else(|| format!("class_{c}"), |n| n.to_string());
    let mut s = String::from("truth\\pred");
    for c in 0..table.n_classes {
        let _ = write!(s, ",{}", name(c));
    }
    s.push('\n');
    for t in 0..table.n_classes {
        s.push_str(&name(t));
        for p in 0..table.n_classes {
            let _ = write!(s, ",{}", table.get(t, p));
        }
        s.push('\n');
    }
    s
}
