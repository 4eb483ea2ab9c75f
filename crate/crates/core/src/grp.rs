//! Global representation propagation: local condense attention, three axial
//! attention passes over the condensed grid, and reverse propagation back to
//! full resolution.
//!
//! Every attention call here is single-head:
//! `softmax_j(q·Wq · (k_j·Wk) / √C + relu(Δ_j · W_pos)) · (k_j·Wv)`, where
//! `Δ_j` is the offset of key `j` from the query,
//! `[Δr, Δθ·r̄, Δz, Δx, Δy]`, with the planar part expressed in the query's
//! own frame (x along the query's ray). Offsets only depend on index
//! differences along the azimuth, so a rotation of the input by whole
//! windows rotates the output exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cart_to_polar, normalize_angle, CartPoint, GridSpec};
use crate::scalar::Scalar;
use crate::tensor::{matmul, matmul_backward, softmax_row, Tensor};

/// Length of the relative position vector fed to `W_pos`.
pub const POS_DIM: usize = 5;

/// Projections of one attention call: `wq`, `wk`, `wv` are `C×C`, `wpos`
/// is `5×1`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnProj<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wpos: Tensor<T>,
}

impl<T: Scalar> AttnProj<T> {
    pub fn new(channels: usize, mut init: impl FnMut(&[usize]) -> Tensor<T>) -> Self {
        let c = channels;
        AttnProj {
            wq: init(&[c, c]),
            wk: init(&[c, c]),
            wv: init(&[c, c]),
            wpos: init(&[POS_DIM, 1]),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        Self::new(channels, Tensor::zeros)
    }

    pub fn channels(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 4] {
        [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wpos", &self.wpos)]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 4] {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wpos", &mut self.wpos),
        ]
    }

    fn validate(&self, c: usize) -> Result<()> {
        for (name, t) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv)] {
            if t.shape() != [c, c] {
                return Err(Error::config(format!("{name} must be {c}×{c}, got {:?}", t.shape())));
            }
        }
        if self.wpos.shape() != [POS_DIM, 1] {
            return Err(Error::config(format!("wpos must be 5×1, got {:?}", self.wpos.shape())));
        }
        Ok(())
    }

    fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.wq.add_assign(&other.wq)?;
        self.wk.add_assign(&other.wk)?;
        self.wv.add_assign(&other.wv)?;
        self.wpos.add_assign(&other.wpos)
    }
}

/// Axial pass order.
pub const AXIAL_AXES: [usize; 3] = [0, 1, 2];

#[derive(Clone, Debug, PartialEq)]
pub struct GrpParams<T> {
    pub local: AttnProj<T>,
    /// Radial, azimuth and height passes, in that order.
    pub axial: [AttnProj<T>; 3],
    pub reverse: AttnProj<T>,
}

impl<T: Scalar> GrpParams<T> {
    pub fn new(channels: usize, mut init: impl FnMut(&[usize]) -> Tensor<T>) -> Self {
        GrpParams {
            local: AttnProj::new(channels, &mut init),
            axial: [
                AttnProj::new(channels, &mut init),
                AttnProj::new(channels, &mut init),
                AttnProj::new(channels, &mut init),
            ],
            reverse: AttnProj::new(channels, &mut init),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        Self::new(channels, Tensor::zeros)
    }

    pub fn channels(&self) -> usize {
        self.local.channels()
    }

    /// All projections with stable names (`local.wq`, `axial_r.wk`, ...).
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        self.groups()
            .into_iter()
            .flat_map(|(g, p)| p.tensors().into_iter().map(move |(n, t)| (format!("{g}.{n}"), t)))
            .collect()
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let [a0, a1, a2] = &mut self.axial;
        [
            ("local", &mut self.local),
            ("axial_r", a0),
            ("axial_a", a1),
            ("axial_z", a2),
            ("reverse", &mut self.reverse),
        ]
        .into_iter()
        .flat_map(|(g, p)| p.tensors_mut().into_iter().map(move |(n, t)| (format!("{g}.{n}"), t)))
        .collect()
    }

    fn groups(&self) -> [(&'static str, &AttnProj<T>); 5] {
        [
            ("local", &self.local),
            ("axial_r", &self.axial[0]),
            ("axial_a", &self.axial[1]),
            ("axial_z", &self.axial[2]),
            ("reverse", &self.reverse),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    fn validate(&self, c: usize) -> Result<()> {
        for (_, p) in self.groups() {
            p.validate(c)?;
        }
        Ok(())
    }
}

fn default_window() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrpConfig {
    /// Window edge `S`, in voxels.
    #[serde(default = "default_window")]
    pub window_s: usize,
    /// Use the attention expression exactly as printed in the original
    /// write-up: `softmax_c(Σ_j s_j v_j + mean_j E_j)`, a softmax over
    /// channels rather than keys. Kept for comparison only.
    #[serde(default)]
    pub literal_eq: bool,
}

impl Default for GrpConfig {
    fn default() -> Self {
        GrpConfig { window_s: default_window(), literal_eq: false }
    }
}

/// Padding and window bookkeeping for a grid split into `S³` windows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub s: usize,
    pub real: [usize; 3],
    pub padded: [usize; 3],
    /// Padding added before index 0 on each axis; the rest goes after the
    /// last index.
    pub before: [usize; 3],
}

impl WindowLayout {
    pub fn new(real: [usize; 3], s: usize) -> Result<Self> {
        if s == 0 {
            return Err(Error::config("grp.window_s must be at least 1"));
        }
        let mut padded = [0; 3];
        let mut before = [0; 3];
        for d in 0..3 {
            padded[d] = real[d].div_ceil(s) * s;
            before[d] = (padded[d] - real[d]) / 2;
        }
        Ok(WindowLayout { s, real, padded, before })
    }

    pub fn condensed(&self) -> [usize; 3] {
        [self.padded[0] / self.s, self.padded[1] / self.s, self.padded[2] / self.s]
    }

    pub fn num_windows(&self) -> usize {
        self.condensed().iter().product()
    }

    fn window_flat(&self, w: [usize; 3]) -> usize {
        let c = self.condensed();
        (w[0] * c[1] + w[1]) * c[2] + w[2]
    }

    fn window_unflat(&self, f: usize) -> [usize; 3] {
        let c = self.condensed();
        [f / (c[1] * c[2]), (f / c[2]) % c[1], f % c[2]]
    }

    /// Real voxels of window `w` in row-major window order; padding is
    /// skipped.
    fn members(&self, w: [usize; 3]) -> Vec<[usize; 3]> {
        let s = self.s;
        let mut out = Vec::with_capacity(s * s * s);
        for i in 0..s {
            for j in 0..s {
                for k in 0..s {
                    let p = [w[0] * s + i, w[1] * s + j, w[2] * s + k];
                    let mut real = [0; 3];
                    let mut inside = true;
                    for d in 0..3 {
                        if p[d] < self.before[d] || p[d] - self.before[d] >= self.real[d] {
                            inside = false;
                            break;
                        }
                        real[d] = p[d] - self.before[d];
                    }
                    if inside {
                        out.push(real);
                    }
                }
            }
        }
        out
    }

    /// Window containing a real voxel.
    fn window_of(&self, v: [usize; 3]) -> [usize; 3] {
        [
            (v[0] + self.before[0]) / self.s,
            (v[1] + self.before[1]) / self.s,
            (v[2] + self.before[2]) / self.s,
        ]
    }

    /// Geometric window center as a continuous index of the real grid.
    pub fn window_center(&self, w: [usize; 3]) -> [f64; 3] {
        let h = (self.s as f64 - 1.0) * 0.5;
        [0, 1, 2].map(|d| (w[d] * self.s) as f64 + h - self.before[d] as f64)
    }
}

/// Relative position vectors between continuous grid indices.
#[derive(Clone, Debug)]
pub struct PositionFrame {
    grid: GridSpec,
}

impl PositionFrame {
    pub fn new(grid: &GridSpec) -> Self {
        PositionFrame { grid: grid.clone() }
    }

    /// `[Δr, Δθ·r̄, Δz, Δx, Δy]` of key `k` seen from query `q`, both given
    /// as continuous indices (voxel centers at integers).
    pub fn delta(&self, q: [f64; 3], k: [f64; 3]) -> [f64; POS_DIM] {
        match &self.grid {
            GridSpec::Polar(s) => {
                let [_, wa, wz] = s.widths();
                let rq = s.radius_at(q[0]);
                let rk = s.radius_at(k[0]);
                let period = s.bins[1] as f64;
                let mut da = (k[1] - q[1]).rem_euclid(period);
                if da >= 0.5 * period {
                    da -= period;
                }
                let dt = da * wa;
                [
                    rk - rq,
                    dt * 0.5 * (rq + rk),
                    (k[2] - q[2]) * wz,
                    rk * dt.cos() - rq,
                    rk * dt.sin(),
                ]
            }
            GridSpec::Cartesian(s) => {
                let at = |u: [f64; 3]| CartPoint {
                    x: s.coord_at(0, u[0]),
                    y: s.coord_at(1, u[1]),
                    z: s.coord_at(2, u[2]),
                };
                let (pq, pk) = (at(q), at(k));
                let (cq, ck) = (cart_to_polar(pq), cart_to_polar(pk));
                [
                    ck.r - cq.r,
                    normalize_angle(ck.theta - cq.theta) * 0.5 * (cq.r + ck.r),
                    pk.z - pq.z,
                    pk.x - pq.x,
                    pk.y - pq.y,
                ]
            }
        }
    }
}

fn to_pos(v: [usize; 3]) -> [f64; 3] {
    v.map(|x| x as f64)
}

/// Query/key wiring of one batched attention call.
struct Problem<'a> {
    q_pos: &'a [[f64; 3]],
    k_pos: &'a [[f64; 3]],
    /// Key rows for each query, in summation order.
    key_sets: &'a [Vec<usize>],
    frame: &'a PositionFrame,
}

struct AttnTape<T> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Softmax weights over keys; the raw scores in literal mode.
    weights: Vec<Vec<T>>,
    /// `Δ·W_pos` before the ReLU.
    pos_pre: Vec<Vec<T>>,
    /// Channel softmax output (literal mode only).
    literal_out: Vec<Vec<T>>,
}

fn pos_pre<T: Scalar>(frame: &PositionFrame, q: [f64; 3], k: [f64; 3], wpos: &[T]) -> (T, [T; POS_DIM]) {
    let d = frame.delta(q, k).map(T::lit);
    let mut s = T::zero();
    for i in 0..POS_DIM {
        s += d[i] * wpos[i];
    }
    (s, d)
}

fn attention_forward<T: Scalar>(
    queries: &Tensor<T>,
    keys: &Tensor<T>,
    prob: &Problem,
    proj: &AttnProj<T>,
    literal: bool,
) -> Result<(Tensor<T>, AttnTape<T>)> {
    let c = proj.channels();
    let q = matmul(queries, &proj.wq)?;
    let k = matmul(keys, &proj.wk)?;
    let v = matmul(keys, &proj.wv)?;
    let scale = T::lit(1.0 / (c as f64).sqrt());
    let nq = queries.shape()[0];
    let wpos = proj.wpos.data();
    let rows: Vec<(Vec<T>, Vec<T>, Vec<T>, Vec<T>)> = (0..nq)
        .into_par_iter()
        .map(|i| {
            let keys_i = &prob.key_sets[i];
            let qi = &q.data()[i * c..(i + 1) * c];
            let mut scores = Vec::with_capacity(keys_i.len());
            let mut pre = Vec::with_capacity(keys_i.len());
            for &j in keys_i {
                let kj = &k.data()[j * c..(j + 1) * c];
                let mut s = T::zero();
                for ch in 0..c {
                    s += qi[ch] * kj[ch];
                }
                scores.push(s * scale);
                pre.push(pos_pre(prob.frame, prob.q_pos[i], prob.k_pos[j], wpos).0);
            }
            let mut out = vec![T::zero(); c];
            if literal {
                let n = T::lit(keys_i.len() as f64);
                let mut bias = T::zero();
                for p in &pre {
                    bias += p.max(T::zero());
                }
                bias /= n;
                for (jj, &j) in keys_i.iter().enumerate() {
                    let vj = &v.data()[j * c..(j + 1) * c];
                    for ch in 0..c {
                        out[ch] += scores[jj] * vj[ch];
                    }
                }
                for o in &mut out {
                    *o += bias;
                }
                softmax_row(&mut out);
                (out.clone(), scores, pre, out)
            } else {
                let mut w: Vec<T> = scores.iter().zip(&pre).map(|(s, p)| *s + p.max(T::zero())).collect();
                softmax_row(&mut w);
                for (jj, &j) in keys_i.iter().enumerate() {
                    let vj = &v.data()[j * c..(j + 1) * c];
                    for ch in 0..c {
                        out[ch] += w[jj] * vj[ch];
                    }
                }
                (out, w, pre, Vec::new())
            }
        })
        .collect();
    let mut out = Vec::with_capacity(nq * c);
    let mut tape = AttnTape {
        q,
        k,
        v,
        weights: Vec::with_capacity(nq),
        pos_pre: Vec::with_capacity(nq),
        literal_out: Vec::with_capacity(if literal { nq } else { 0 }),
    };
    for (o, w, p, l) in rows {
        out.extend(o);
        tape.weights.push(w);
        tape.pos_pre.push(p);
        if literal {
            tape.literal_out.push(l);
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite attention output".into()));
    }
    Ok((Tensor::new(&[nq, c], out)?, tape))
}

/// Returns gradients for the raw queries, the raw keys and the projections.
fn attention_backward<T: Scalar>(
    queries: &Tensor<T>,
    keys: &Tensor<T>,
    prob: &Problem,
    proj: &AttnProj<T>,
    literal: bool,
    tape: &AttnTape<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, AttnProj<T>)> {
    let c = proj.channels();
    let scale = T::lit(1.0 / (c as f64).sqrt());
    let nq = queries.shape()[0];
    let nk = keys.shape()[0];
    let mut dq = vec![T::zero(); nq * c];
    let mut dk = vec![T::zero(); nk * c];
    let mut dv = vec![T::zero(); nk * c];
    let mut dwpos = [T::zero(); POS_DIM];
    let (qd, kd, vd) = (tape.q.data(), tape.k.data(), tape.v.data());
    let wpos = proj.wpos.data();
    for i in 0..nq {
        let keys_i = &prob.key_sets[i];
        let g = &grad_out.data()[i * c..(i + 1) * c];
        let n = keys_i.len();
        // d(score_j) and d(pre-relu position term_j)
        let mut ds = vec![T::zero(); n];
        let mut dpre = vec![T::zero(); n];
        if literal {
            let y = &tape.literal_out[i];
            let mut yg = T::zero();
            for ch in 0..c {
                yg += y[ch] * g[ch];
            }
            let dz: Vec<T> = (0..c).map(|ch| y[ch] * (g[ch] - yg)).collect();
            let dbias = dz.iter().fold(T::zero(), |a, b| a + *b) / T::lit(n as f64);
            let scores = &tape.weights[i];
            for (jj, &j) in keys_i.iter().enumerate() {
                let mut s = T::zero();
                for ch in 0..c {
                    s += dz[ch] * vd[j * c + ch];
                    dv[j * c + ch] += scores[jj] * dz[ch];
                }
                ds[jj] = s;
                if tape.pos_pre[i][jj] > T::zero() {
                    dpre[jj] = dbias;
                }
            }
        } else {
            let w = &tape.weights[i];
            let mut da = vec![T::zero(); n];
            let mut dot = T::zero();
            for (jj, &j) in keys_i.iter().enumerate() {
                let mut s = T::zero();
                for ch in 0..c {
                    s += g[ch] * vd[j * c + ch];
                    dv[j * c + ch] += w[jj] * g[ch];
                }
                da[jj] = s;
                dot += w[jj] * s;
            }
            for jj in 0..n {
                let dz = w[jj] * (da[jj] - dot);
                ds[jj] = dz;
                if tape.pos_pre[i][jj] > T::zero() {
                    dpre[jj] = dz;
                }
            }
        }
        for (jj, &j) in keys_i.iter().enumerate() {
            let d = ds[jj] * scale;
            for ch in 0..c {
                dq[i * c + ch] += d * kd[j * c + ch];
                dk[j * c + ch] += d * qd[i * c + ch];
            }
            if dpre[jj] != T::zero() {
                let (_, delta) = pos_pre(prob.frame, prob.q_pos[i], prob.k_pos[j], wpos);
                for p in 0..POS_DIM {
                    dwpos[p] += dpre[jj] * delta[p];
                }
            }
        }
    }
    let dq = Tensor::new(&[nq, c], dq)?;
    let dk = Tensor::new(&[nk, c], dk)?;
    let dv = Tensor::new(&[nk, c], dv)?;
    let (gq, gwq) = matmul_backward(queries, &proj.wq, &dq)?;
    let (mut gk, gwk) = matmul_backward(keys, &proj.wk, &dk)?;
    let (gkv, gwv) = matmul_backward(keys, &proj.wv, &dv)?;
    gk.add_assign(&gkv)?;
    let grads = AttnProj { wq: gwq, wk: gwk, wv: gwv, wpos: Tensor::new(&[POS_DIM, 1], dwpos.to_vec())? };
    Ok((gq, gk, grads))
}

/// Feature vector with the largest L2 norm among the rows of `window` (last
/// axis = channels), and its row index. Ties go to the lowest index.
pub fn maxsel<T: Scalar>(window: &Tensor<T>) -> (Vec<T>, usize) {
    let c = *window.shape().last().expect("rank >= 1");
    let rows: Vec<&[T]> = window.data().chunks_exact(c).collect();
    let best = argmax_norm(&rows);
    (rows[best].to_vec(), best)
}

fn argmax_norm<T: Scalar>(rows: &[&[T]]) -> usize {
    let mut best = 0;
    let mut best_norm = T::neg_infinity();
    for (i, r) in rows.iter().enumerate() {
        let n = r.iter().fold(T::zero(), |a, v| a + *v * *v);
        if n > best_norm {
            best = i;
            best_norm = n;
        }
    }
    best
}

/// Condensed `[R/S, A/S, Z/S, C]` grid (extents rounded up after padding).
#[derive(Clone, Debug, PartialEq)]
pub struct CondensedVolume<T> {
    pub data: Tensor<T>,
    pub layout: WindowLayout,
    /// Voxel picked by max selection in each window, in window order.
    pub representatives: Vec<[usize; 3]>,
}

impl<T: Scalar> CondensedVolume<T> {
    /// Polar and Cartesian centers of each window's representative voxel.
    pub fn representative_centers(&self, grid: &GridSpec) -> Vec<(crate::geometry::PolarPoint, CartPoint)> {
        self.representatives
            .iter()
            .map(|v| (grid.center_polar(*v), grid.center_cart(*v)))
            .collect()
    }
}

fn check_input<T: Scalar>(x: &Tensor<T>, grid: &GridSpec, c: usize) -> Result<[usize; 3]> {
    let b = grid.bins();
    if x.rank() != 4 || x.shape()[..3] != b || x.shape()[3] != c {
        return Err(Error::config(format!(
            "grp expects a {:?}×{c} volume, got {:?}",
            b,
            x.shape()
        )));
    }
    Ok(b)
}

fn flat3(ext: [usize; 3], v: [usize; 3]) -> usize {
    (v[0] * ext[1] + v[1]) * ext[2] + v[2]
}

fn unflat3(ext: [usize; 3], f: usize) -> [usize; 3] {
    [f / (ext[1] * ext[2]), (f / ext[2]) % ext[1], f % ext[2]]
}

fn rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let c = *x.shape().last().expect("rank >= 1");
    x.clone().reshape(&[x.len() / c, c])
}

struct LocalWiring {
    /// Flat voxel index of each window's query.
    query_voxel: Vec<usize>,
    q_pos: Vec<[f64; 3]>,
    k_pos: Vec<[f64; 3]>,
    key_sets: Vec<Vec<usize>>,
    representatives: Vec<[usize; 3]>,
}

fn local_wiring<T: Scalar>(x: &Tensor<T>, layout: &WindowLayout) -> LocalWiring {
    let ext = layout.real;
    let c = x.shape()[3];
    let n = ext.iter().product();
    let k_pos = (0..n).map(|f| to_pos(unflat3(ext, f))).collect();
    let mut w = LocalWiring {
        query_voxel: Vec::new(),
        q_pos: Vec::new(),
        k_pos,
        key_sets: Vec::new(),
        representatives: Vec::new(),
    };
    for wf in 0..layout.num_windows() {
        let members = layout.members(layout.window_unflat(wf));
        let flats: Vec<usize> = members.iter().map(|m| flat3(ext, *m)).collect();
        let feats: Vec<&[T]> = flats.iter().map(|f| &x.data()[f * c..(f + 1) * c]).collect();
        let best = argmax_norm(&feats);
        w.query_voxel.push(flats[best]);
        w.q_pos.push(to_pos(members[best]));
        w.representatives.push(members[best]);
        w.key_sets.push(flats);
    }
    w
}

/// Condenses each `S³` window into one feature: the max-norm voxel queries
/// every voxel of its window.
pub fn local_condense_attention<T: Scalar>(
    x: &Tensor<T>,
    grid: &GridSpec,
    proj: &AttnProj<T>,
    cfg: &GrpConfig,
) -> Result<CondensedVolume<T>> {
    let c = proj.channels();
    proj.validate(c)?;
    let ext = check_input(x, grid, c)?;
    let layout = WindowLayout::new(ext, cfg.window_s)?;
    let (cv, _) = local_forward(x, grid, &layout, proj, cfg.literal_eq)?;
    Ok(cv)
}

struct LocalTape<T> {
    wiring: LocalWiring,
    queries: Tensor<T>,
    keys: Tensor<T>,
    attn: AttnTape<T>,
}

fn local_forward<T: Scalar>(
    x: &Tensor<T>,
    grid: &GridSpec,
    layout: &WindowLayout,
    proj: &AttnProj<T>,
    literal: bool,
) -> Result<(CondensedVolume<T>, LocalTape<T>)> {
    let c = proj.channels();
    let wiring = local_wiring(x, layout);
    let keys = rows(x)?;
    let qdata = wiring
        .query_voxel
        .iter()
        .flat_map(|f| keys.data()[f * c..(f + 1) * c].iter().copied())
        .collect();
    let queries = Tensor::new(&[wiring.query_voxel.len(), c], qdata)?;
    let frame = PositionFrame::new(grid);
    let prob = Problem { q_pos: &wiring.q_pos, k_pos: &wiring.k_pos, key_sets: &wiring.key_sets, frame: &frame };
    let (out, attn) = attention_forward(&queries, &keys, &prob, proj, literal)?;
    let [a, b, z] = layout.condensed();
    let cv = CondensedVolume {
        data: out.reshape(&[a, b, z, c])?,
        layout: layout.clone(),
        representatives: wiring.representatives.clone(),
    };
    Ok((cv, LocalTape { wiring, queries, keys, attn }))
}

fn axial_key_sets(cond: [usize; 3], axis: usize) -> Vec<Vec<usize>> {
    let n: usize = cond.iter().product();
    let len = cond[axis];
    (0..n)
        .map(|f| {
            let w = unflat3(cond, f);
            (0..len)
                .map(|t| {
                    let mut k = w;
                    k[axis] = (w[axis] + t) % len;
                    flat3(cond, k)
                })
                .collect()
        })
        .collect()
}

fn window_positions(layout: &WindowLayout) -> Vec<[f64; 3]> {
    (0..layout.num_windows()).map(|f| layout.window_center(layout.window_unflat(f))).collect()
}

struct AxialTape<T> {
    inputs: Vec<Tensor<T>>,
    attn: Vec<AttnTape<T>>,
}

/// Three residual self-attention passes over the condensed grid: strips
/// along range, then azimuth, then height.
pub fn global_decomposed_attention<T: Scalar>(
    cv: &CondensedVolume<T>,
    grid: &GridSpec,
    axial: &[AttnProj<T>; 3],
    cfg: &GrpConfig,
) -> Result<CondensedVolume<T>> {
    let c = *cv.data.shape().last().unwrap();
    for p in axial {
        p.validate(c)?;
    }
    let (data, _) = axial_forward(&cv.data, &cv.layout, grid, axial, cfg.literal_eq)?;
    Ok(CondensedVolume { data, layout: cv.layout.clone(), representatives: cv.representatives.clone() })
}

/// One residual attention pass along strips parallel to `axis` of a
/// condensed grid.
pub fn axial_attention_pass<T: Scalar>(
    cv: &CondensedVolume<T>,
    grid: &GridSpec,
    axis: usize,
    proj: &AttnProj<T>,
    cfg: &GrpConfig,
) -> Result<CondensedVolume<T>> {
    if axis > 2 {
        return Err(Error::config(format!("no axis {axis}")));
    }
    let c = *cv.data.shape().last().unwrap();
    proj.validate(c)?;
    let pos = window_positions(&cv.layout);
    let frame = PositionFrame::new(grid);
    let sets = axial_key_sets(cv.layout.condensed(), axis);
    let prob = Problem { q_pos: &pos, k_pos: &pos, key_sets: &sets, frame: &frame };
    let h = rows(&cv.data)?;
    let (out, _) = attention_forward(&h, &h, &prob, proj, cfg.literal_eq)?;
    let mut data = cv.data.clone();
    data.data_mut().iter_mut().zip(out.data()).for_each(|(a, b)| *a += *b);
    Ok(CondensedVolume { data, layout: cv.layout.clone(), representatives: cv.representatives.clone() })
}

fn axial_forward<T: Scalar>(
    data: &Tensor<T>,
    layout: &WindowLayout,
    grid: &GridSpec,
    axial: &[AttnProj<T>; 3],
    literal: bool,
) -> Result<(Tensor<T>, AxialTape<T>)> {
    let shape = data.shape().to_vec();
    let pos = window_positions(layout);
    let frame = PositionFrame::new(grid);
    let mut h = rows(data)?;
    let mut tape = AxialTape { inputs: Vec::new(), attn: Vec::new() };
    for (axis, proj) in AXIAL_AXES.into_iter().zip(axial) {
        let sets = axial_key_sets(layout.condensed(), axis);
        let prob = Problem { q_pos: &pos, k_pos: &pos, key_sets: &sets, frame: &frame };
        let (out, t) = attention_forward(&h, &h, &prob, proj, literal)?;
        let mut next = h.clone();
        next.add_assign(&out)?;
        tape.inputs.push(h);
        tape.attn.push(t);
        h = next;
    }
    Ok((h.reshape(&shape)?, tape))
}

/// Window keys of a full-resolution voxel: its own window, then the face
/// neighbors along range, azimuth and height (range and height clipped at
/// the border, azimuth wrapped), without repeats.
fn reverse_keys(layout: &WindowLayout, v: [usize; 3]) -> Vec<usize> {
    let cond = layout.condensed();
    let own = layout.window_of(v);
    let mut out = vec![layout.window_flat(own)];
    for axis in 0..3 {
        for step in [-1isize, 1] {
            let mut w = own;
            let p = own[axis] as isize + step;
            if axis == 1 {
                w[1] = p.rem_euclid(cond[1] as isize) as usize;
            } else if p < 0 || p >= cond[axis] as isize {
                continue;
            } else {
                w[axis] = p as usize;
            }
            let f = layout.window_flat(w);
            if !out.contains(&f) {
                out.push(f);
            }
        }
    }
    out
}

/// Spreads the condensed features back to every voxel by cross attention
/// over nearby windows, added to `x`.
pub fn reverse_propagate<T: Scalar>(
    x: &Tensor<T>,
    grid: &GridSpec,
    cv: &CondensedVolume<T>,
    proj: &AttnProj<T>,
    cfg: &GrpConfig,
) -> Result<Tensor<T>> {
    let c = proj.channels();
    proj.validate(c)?;
    let ext = check_input(x, grid, c)?;
    if cv.layout.real != ext || cv.data.shape()[..3] != cv.layout.condensed() {
        return Err(Error::config(format!(
            "condensed grid {:?} does not match volume {:?}",
            cv.data.shape(),
            x.shape()
        )));
    }
    reverse_forward(x, grid, &cv.data, &cv.layout, proj, cfg.literal_eq).map(|(y, _)| y)
}

struct ReverseWiring {
    q_pos: Vec<[f64; 3]>,
    k_pos: Vec<[f64; 3]>,
    key_sets: Vec<Vec<usize>>,
}

fn reverse_wiring(layout: &WindowLayout) -> ReverseWiring {
    let ext = layout.real;
    let n: usize = ext.iter().product();
    ReverseWiring {
        q_pos: (0..n).map(|f| to_pos(unflat3(ext, f))).collect(),
        k_pos: window_positions(layout),
        key_sets: (0..n).map(|f| reverse_keys(layout, unflat3(ext, f))).collect(),
    }
}

fn reverse_forward<T: Scalar>(
    x: &Tensor<T>,
    grid: &GridSpec,
    cond: &Tensor<T>,
    layout: &WindowLayout,
    proj: &AttnProj<T>,
    literal: bool,
) -> Result<(Tensor<T>, (ReverseWiring, Tensor<T>, Tensor<T>, AttnTape<T>))> {
    let wiring = reverse_wiring(layout);
    let frame = PositionFrame::new(grid);
    let queries = rows(x)?;
    let keys = rows(cond)?;
    let prob = Problem { q_pos: &wiring.q_pos, k_pos: &wiring.k_pos, key_sets: &wiring.key_sets, frame: &frame };
    let (out, tape) = attention_forward(&queries, &keys, &prob, proj, literal)?;
    let mut y = x.clone();
    y.data_mut().iter_mut().zip(out.data()).for_each(|(a, b)| *a += *b);
    Ok((y, (wiring, queries, keys, tape)))
}

/// Intermediate values of [`grp_forward_taped`].
pub struct GrpTape<T> {
    layout: WindowLayout,
    local: LocalTape<T>,
    axial: AxialTape<T>,
    reverse: (ReverseWiring, Tensor<T>, Tensor<T>, AttnTape<T>),
}

impl<T> GrpTape<T> {
    pub fn layout(&self) -> &WindowLayout {
        &self.layout
    }
}

pub fn grp_forward<T: Scalar>(
    x: &Tensor<T>,
    grid: &GridSpec,
    params: &GrpParams<T>,
    cfg: &GrpConfig,
) -> Result<Tensor<T>> {
    grp_forward_taped(x, grid, params, cfg).map(|(y, _)| y)
}

pub fn grp_forward_taped<T: Scalar>(
    x: &Tensor<T>,
    grid: &GridSpec,
    params: &GrpParams<T>,
    cfg: &GrpConfig,
) -> Result<(Tensor<T>, GrpTape<T>)> {
    let c = params.channels();
    params.validate(c)?;
    let ext = check_input(x, grid, c)?;
    let layout = WindowLayout::new(ext, cfg.window_s)?;
    let (cv, local) = local_forward(x, grid, &layout, &params.local, cfg.literal_eq)?;
    let (propagated, axial) = axial_forward(&cv.data, &layout, grid, &params.axial, cfg.literal_eq)?;
    let (y, reverse) = reverse_forward(x, grid, &propagated, &layout, &params.reverse, cfg.literal_eq)?;
    let tape = GrpTape { layout, local, axial, reverse };
    Ok((y, tape))
}

pub fn grp_backward<T: Scalar>(
    x: &Tensor<T>,
    grid: &GridSpec,
    params: &GrpParams<T>,
    cfg: &GrpConfig,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, GrpParams<T>)> {
    let (_, tape) = grp_forward_taped(x, grid, params, cfg)?;
    grp_backward_taped(&tape, grid, params, cfg, grad_out)
}

pub fn grp_backward_taped<T: Scalar>(
    tape: &GrpTape<T>,
    grid: &GridSpec,
    params: &GrpParams<T>,
    cfg: &GrpConfig,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, GrpParams<T>)> {
    let c = params.channels();
    let literal = cfg.literal_eq;
    let frame = PositionFrame::new(grid);
    let mut grads = GrpParams::zeros(c);

    // reverse propagation: y = x + attn(x, propagated)
    let (rw, rq, rk, rt) = &tape.reverse;
    let prob = Problem { q_pos: &rw.q_pos, k_pos: &rw.k_pos, key_sets: &rw.key_sets, frame: &frame };
    let g_rows = rows(grad_out)?;
    let (gq, mut g_cond, gp) = attention_backward(rq, rk, &prob, &params.reverse, literal, rt, &g_rows)?;
    grads.reverse = gp;
    let mut gx = grad_out.clone();
    gx.data_mut().iter_mut().zip(gq.data()).for_each(|(a, b)| *a += *b);

    // axial passes, last to first: h' = h + attn(h, h)
    let pos = window_positions(&tape.layout);
    for axis in AXIAL_AXES.into_iter().rev() {
        let sets = axial_key_sets(tape.layout.condensed(), axis);
        let prob = Problem { q_pos: &pos, k_pos: &pos, key_sets: &sets, frame: &frame };
        let h = &tape.axial.inputs[axis];
        let (gq, gk, gp) =
            attention_backward(h, h, &prob, &params.axial[axis], literal, &tape.axial.attn[axis], &g_cond)?;
        grads.axial[axis].add_assign(&gp)?;
        g_cond.add_assign(&gq)?;
        g_cond.add_assign(&gk)?;
    }

    // local condense: rep = attn(x[maxsel], x)
    let lw = &tape.local.wiring;
    let prob = Problem { q_pos: &lw.q_pos, k_pos: &lw.k_pos, key_sets: &lw.key_sets, frame: &frame };
    let (gq, gk, gp) = attention_backward(
        &tape.local.queries,
        &tape.local.keys,
        &prob,
        &params.local,
        literal,
        &tape.local.attn,
        &g_cond,
    )?;
    grads.local = gp;
    let gxd = gx.data_mut();
    for (a, b) in gxd.iter_mut().zip(gk.data()) {
        *a += *b;
    }
    for (w, &f) in lw.query_voxel.iter().enumerate() {
        for ch in 0..c {
            gxd[f * c + ch] += gq.data()[w * c + ch];
        }
    }
    Ok((gx, grads))
}
