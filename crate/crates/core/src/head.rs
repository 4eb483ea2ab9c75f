//! Occupancy head: trilinear resampling of the working volume onto the
//! Cartesian output grid, a per-voxel linear classifier and the training
//! loss.
//!
//! Sampling works in continuous index space (bin `i` centered at `u = i`).
//! Along range and height a query within half a bin beyond the outer bin
//! edges is clamped to the edge bins; farther out it samples zero. Azimuth
//! wraps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CartPoint, CartesianGridSpec, GridSpec, PolarPoint};
use crate::scalar::Scalar;
use crate::tensor::{matmul, matmul_backward, softmax_row, Tensor};

/// The eight voxels around a query, ordered by `(r, a, z)` bit pattern
/// (bit 2 = upper range neighbor), and the fractional offsets along each axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corners {
    pub idx: [usize; 8],
    pub t: [f64; 3],
}

impl Corners {
    /// Trilinear weights of the eight corners; they sum to one.
    pub fn weights(&self) -> [f64; 8] {
        let t = self.t;
        std::array::from_fn(|k| {
            let w = |bit: usize, d: usize| if k >> bit & 1 == 1 { t[d] } else { 1.0 - t[d] };
            w(2, 0) * w(1, 1) * w(0, 2)
        })
    }

    /// Nested linear interpolation, so a constant neighborhood reproduces
    /// its value exactly.
    fn blend<T: Scalar>(&self, vol: &[T], c: usize, out: &mut [T]) {
        let [tr, ta, tz] = self.t.map(T::lit);
        let lerp = |a: T, b: T, t: T| a + t * (b - a);
        for (ch, o) in out.iter_mut().enumerate() {
            let v = |k: usize| vol[self.idx[k] * c + ch];
            let a0 = lerp(lerp(v(0), v(1), tz), lerp(v(2), v(3), tz), ta);
            let a1 = lerp(lerp(v(4), v(5), tz), lerp(v(6), v(7), tz), ta);
            *o = lerp(a0, a1, tr);
        }
    }
}

/// Corners at continuous index `u` of a grid with extents `bins`; `None`
/// outside the sampling support.
pub fn corners_at(bins: [usize; 3], wrap_azimuth: bool, u: [f64; 3]) -> Option<Corners> {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut t = [0.0f64; 3];
    for d in 0..3 {
        let n = bins[d];
        if d == 1 && wrap_azimuth {
            let v = u[d].rem_euclid(n as f64);
            let i = (v.floor() as usize).min(n - 1);
            lo[d] = i;
            hi[d] = (i + 1) % n;
            t[d] = v - i as f64;
            continue;
        }
        if !(u[d] >= -1.0 && u[d] <= n as f64) {
            return None;
        }
        let v = u[d].clamp(0.0, (n - 1) as f64);
        let i = (v.floor() as usize).min(n.saturating_sub(2));
        lo[d] = i;
        hi[d] = (i + 1).min(n - 1);
        t[d] = v - i as f64;
    }
    let flat = |a: usize, b: usize, c: usize| (a * bins[1] + b) * bins[2] + c;
    let idx = std::array::from_fn(|k| {
        let pick = |bit: usize, d: usize| if k >> bit & 1 == 1 { hi[d] } else { lo[d] };
        flat(pick(2, 0), pick(1, 1), pick(0, 2))
    });
    Some(Corners { idx, t })
}

/// Corner weights of a Cartesian point on any working grid.
pub fn corners_for(grid: &GridSpec, p: CartPoint) -> Option<Corners> {
    corners_at(grid.bins(), grid.is_polar(), grid.continuous_index(p))
}

fn blend<T: Scalar>(vol: &Tensor<T>, corners: Option<&Corners>, out: &mut [T]) {
    match corners {
        Some(cs) => cs.blend(vol.data(), out.len(), out),
        None => out.iter_mut().for_each(|o| *o = T::zero()),
    }
}

fn check_volume<T: Scalar>(vol: &Tensor<T>, grid: &GridSpec) -> Result<usize> {
    let b = grid.bins();
    if vol.rank() != 4 || vol.shape()[..3] != b {
        return Err(Error::Dimension { op: "sample", lhs: b.to_vec(), rhs: vol.shape().to_vec() });
    }
    Ok(vol.shape()[3])
}

/// Feature at a polar location of a volume on a polar grid.
pub fn trilinear_sample<T: Scalar>(vol: &Tensor<T>, grid: &GridSpec, q: PolarPoint) -> Result<Vec<T>> {
    let c = check_volume(vol, grid)?;
    let corners = match grid {
        GridSpec::Polar(s) => corners_at(s.bins, true, s.continuous_index(q)),
        GridSpec::Cartesian(_) => corners_for(grid, crate::geometry::polar_to_cart(q)),
    };
    let mut out = vec![T::zero(); c];
    blend(vol, corners.as_ref(), &mut out);
    Ok(out)
}

/// Gradient of `⟨g, trilinear_sample(vol, q)⟩` with respect to `vol`.
pub fn trilinear_sample_backward<T: Scalar>(
    vol_shape: &[usize],
    grid: &GridSpec,
    q: PolarPoint,
    g: &[T],
) -> Result<Tensor<T>> {
    let mut out = Tensor::zeros(vol_shape);
    let c = check_volume(&out, grid)?;
    let corners = match grid {
        GridSpec::Polar(s) => corners_at(s.bins, true, s.continuous_index(q)),
        GridSpec::Cartesian(_) => corners_for(grid, crate::geometry::polar_to_cart(q)),
    };
    if let Some(cs) = corners {
        for (f, w) in cs.idx.into_iter().zip(cs.weights()) {
            for ch in 0..c {
                out.data_mut()[f * c + ch] += T::lit(w) * g[ch];
            }
        }
    }
    Ok(out)
}

/// Precomputed sampling of a working grid at every output voxel center.
#[derive(Clone, Debug)]
pub struct ResamplePlan {
    pub source: GridSpec,
    pub target: CartesianGridSpec,
    corners: Vec<Option<Corners>>,
}

impl ResamplePlan {
    pub fn new(source: &GridSpec, target: &CartesianGridSpec) -> Self {
        let tgt = GridSpec::Cartesian(target.clone());
        let corners = (0..target.num_voxels())
            .into_par_iter()
            .map(|f| corners_for(source, tgt.center_cart(tgt.unflat(f))))
            .collect();
        ResamplePlan { source: source.clone(), target: target.clone(), corners }
    }

    /// Output voxels that see any source support.
    pub fn covered(&self) -> Vec<bool> {
        self.corners.iter().map(Option::is_some).collect()
    }

    pub fn apply<T: Scalar>(&self, vol: &Tensor<T>) -> Result<Tensor<T>> {
        let c = check_volume(vol, &self.source)?;
        let [x, y, z] = self.target.bins;
        let mut out = vec![T::zero(); x * y * z * c];
        out.par_chunks_mut(c)
            .zip(&self.corners)
            .for_each(|(o, cs)| blend(vol, cs.as_ref(), o));
        Tensor::new(&[x, y, z, c], out)
    }

    /// Gradient with respect to the source volume. Contributions are summed
    /// in output-voxel order.
    pub fn backward<T: Scalar>(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let c = grad_out.shape()[3];
        let [a, b, z] = self.source.bins();
        let mut g = Tensor::zeros(&[a, b, z, c]);
        let gd = g.data_mut();
        for (v, cs) in self.corners.iter().enumerate() {
            let Some(cs) = cs else { continue };
            let go = &grad_out.data()[v * c..(v + 1) * c];
            for (f, w) in cs.idx.into_iter().zip(cs.weights()) {
                if w == 0.0 {
                    continue;
                }
                let w = T::lit(w);
                for ch in 0..c {
                    gd[f * c + ch] += w * go[ch];
                }
            }
        }
        Ok(g)
    }
}

/// Resamples a working volume onto a Cartesian grid without keeping the
/// sampling weights around (see [`ResamplePlan`] for repeated use).
pub fn polar_to_cartesian_grid<T: Scalar>(
    vol: &Tensor<T>,
    source: &GridSpec,
    target: &CartesianGridSpec,
) -> Result<Tensor<T>> {
    let c = check_volume(vol, source)?;
    let tgt = GridSpec::Cartesian(target.clone());
    let [x, y, z] = target.bins;
    let mut out = vec![T::zero(); x * y * z * c];
    out.par_chunks_mut(c).enumerate().for_each(|(f, o)| {
        let cs = corners_for(source, tgt.center_cart(tgt.unflat(f)));
        blend(vol, cs.as_ref(), o)
    });
    Tensor::new(&[x, y, z, c], out)
}

/// Semantic labels on the Cartesian output grid; label 0 is free space.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticGrid {
    pub spec: CartesianGridSpec,
    pub n_classes: usize,
    pub labels: Vec<u16>,
}

pub const SEMANTIC_MAGIC: &[u8; 7] = b"PVOSEM1";
pub const FREE: u16 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticSummary {
    pub extents: [usize; 3],
    pub n_classes: usize,
    pub class_counts: Vec<usize>,
}

impl SemanticGrid {
    pub fn new(spec: CartesianGridSpec, n_classes: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != spec.num_voxels() {
            return Err(Error::Dimension {
                op: "semantic grid",
                lhs: spec.bins.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(l) = labels.iter().find(|l| **l as usize >= n_classes) {
            return Err(Error::data(format!("label {l} outside {n_classes} classes")));
        }
        Ok(SemanticGrid { spec, n_classes, labels })
    }

    pub fn free(spec: CartesianGridSpec, n_classes: usize) -> Self {
        let n = spec.num_voxels();
        SemanticGrid { spec, n_classes, labels: vec![FREE; n] }
    }

    pub fn extents(&self) -> [usize; 3] {
        self.spec.bins
    }

    pub fn get(&self, idx: [usize; 3]) -> u16 {
        let b = self.spec.bins;
        self.labels[(idx[0] * b[1] + idx[1]) * b[2] + idx[2]]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for l in &self.labels {
            c[*l as usize] += 1;
        }
        c
    }

    pub fn summary(&self) -> SemanticSummary {
        SemanticSummary { extents: self.spec.bins, n_classes: self.n_classes, class_counts: self.class_counts() }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(SEMANTIC_MAGIC)?;
        for e in self.spec.bins {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for l in &self.labels {
            w.write_all(&l.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a grid stored for `spec`; the stored extents must match it.
    pub fn read_from<R: Read>(r: &mut R, spec: CartesianGridSpec, n_classes: usize) -> Result<Self> {
        let (extents, labels) = read_labels_from(r)?;
        if extents != spec.bins {
            return Err(Error::Format(format!(
                "label file has extents {extents:?}, grid has {:?}",
                spec.bins
            )));
        }
        Self::new(spec, n_classes, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, spec: CartesianGridSpec, n_classes: usize) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?), spec, n_classes)
    }
}

/// Raw extents and labels of a `PVOSEM1` stream.
pub fn read_labels_from<R: Read>(r: &mut R) -> Result<([usize; 3], Vec<u16>)> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic).map_err(|_| Error::Format("truncated label header".into()))?;
    if &magic != SEMANTIC_MAGIC {
        return Err(Error::Format("bad label magic".into()));
    }
    let mut ext = [0usize; 3];
    for e in &mut ext {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| Error::Format("truncated label header".into()))?;
        *e = u32::from_le_bytes(b) as usize;
    }
    let n: usize = ext.iter().product();
    let mut buf = vec![0u8; n * 2];
    r.read_exact(&mut buf).map_err(|_| Error::Format("truncated label payload".into()))?;
    let labels = buf.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    Ok((ext, labels))
}

/// Linear classifier weights: `weight` is `C×K`, `bias` is `K`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> HeadParams<T> {
    pub fn new(channels: usize, n_classes: usize, mut init: impl FnMut(&[usize]) -> Tensor<T>) -> Self {
        HeadParams { weight: init(&[channels, n_classes]), bias: Tensor::zeros(&[n_classes]) }
    }

    pub fn zeros(channels: usize, n_classes: usize) -> Self {
        Self::new(channels, n_classes, Tensor::zeros)
    }

    pub fn n_classes(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn feature_rows<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let s = f.shape();
    if s.len() != 4 {
        return Err(Error::config(format!("features must be rank 4, got {s:?}")));
    }
    f.clone().reshape(&[s[0] * s[1] * s[2], s[3]])
}

/// Logits `[X, Y, Z, K]` and argmax labels.
pub fn classify<T: Scalar>(features: &Tensor<T>, params: &HeadParams<T>) -> Result<(Tensor<T>, Vec<u16>)> {
    let s = features.shape().to_vec();
    let k = params.n_classes();
    if params.weight.shape()[0] != *s.last().unwrap_or(&0) || params.bias.shape() != [k] {
        return Err(Error::config(format!(
            "classifier {:?} does not fit features {:?}",
            params.weight.shape(),
            s
        )));
    }
    let mut logits = matmul(&feature_rows(features)?, &params.weight)?;
    for row in logits.data_mut().chunks_exact_mut(k) {
        for (l, b) in row.iter_mut().zip(params.bias.data()) {
            *l += *b;
        }
    }
    let labels = logits.data().chunks_exact(k).map(|r| argmax(r) as u16).collect();
    Ok((logits.reshape(&[s[0], s[1], s[2], k])?, labels))
}

/// Gradients for the features and classifier from logit gradients.
pub fn classify_backward<T: Scalar>(
    features: &Tensor<T>,
    params: &HeadParams<T>,
    grad_logits: &Tensor<T>,
) -> Result<(Tensor<T>, HeadParams<T>)> {
    let k = params.n_classes();
    let gl = grad_logits.clone().reshape(&[grad_logits.len() / k, k])?;
    let (gf, gw) = matmul_backward(&feature_rows(features)?, &params.weight, &gl)?;
    let mut gb = vec![T::zero(); k];
    for row in gl.data().chunks_exact(k) {
        for (b, g) in gb.iter_mut().zip(row) {
            *b += *g;
        }
    }
    Ok((gf.reshape(features.shape())?, HeadParams { weight: gw, bias: Tensor::new(&[k], gb)? }))
}

/// Mean over voxels of `w[t] · (−ln softmax(logits)[t])`, and its gradient
/// with respect to the logits.
pub fn cross_entropy_loss<T: Scalar>(
    logits: &Tensor<T>,
    target: &[u16],
    class_weights: &[f64],
) -> Result<(T, Tensor<T>)> {
    let k = *logits.shape().last().unwrap_or(&0);
    let n = logits.len() / k.max(1);
    if target.len() != n || class_weights.len() != k {
        return Err(Error::Dimension {
            op: "cross_entropy_loss",
            lhs: logits.shape().to_vec(),
            rhs: vec![target.len(), class_weights.len()],
        });
    }
    if class_weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::config("class weights must be nonnegative"));
    }
    if let Some(t) = target.iter().find(|t| **t as usize >= k) {
        return Err(Error::data(format!("label {t} outside {k} classes")));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0f64;
    for (row, &t) in grad.data_mut().chunks_exact_mut(k).zip(target) {
        let t = t as usize;
        let m = row.iter().fold(T::neg_infinity(), |a, b| a.max(*b)).as_f64();
        let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
        let w = class_weights[t];
        loss += w * (lse - row[t].as_f64());
        softmax_row(row);
        row[t] -= T::one();
        let s = T::lit(w * inv_n);
        for v in row.iter_mut() {
            *v *= s;
        }
    }
    Ok((T::lit(loss * inv_n), grad))
}
