//! Polar and Cartesian coordinates and the grid specs that own every
//! index ↔ coordinate conversion.
//!
//! Bins are half-open `[lo, hi)` except the last bin on each bounded axis,
//! which is closed so that points at the upper range limit stay in range.
//! The azimuth axis is circular.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Padding;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolarPoint {
    pub r: f64,
    pub theta: f64,
    pub z: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CartPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl PolarPoint {
    pub fn new(r: f64, theta: f64, z: f64) -> Self {
        Self { r, theta, z }
    }
}

impl CartPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn bev_radius(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

/// Maps an angle into `(-π, π]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let t = (theta + PI).rem_euclid(TAU) - PI;
    if t <= -PI {
        t + TAU
    } else {
        t
    }
}

/// The origin maps to `r = 0, θ = 0`.
pub fn cart_to_polar(p: CartPoint) -> PolarPoint {
    let r = p.x.hypot(p.y);
    let theta = if r == 0.0 { 0.0 } else { normalize_angle(p.y.atan2(p.x)) };
    PolarPoint { r, theta, z: p.z }
}

pub fn polar_to_cart(p: PolarPoint) -> CartPoint {
    let (s, c) = p.theta.sin_cos();
    CartPoint {
        x: p.r * c,
        y: p.r * s,
        z: p.z,
    }
}

/// Uniform binning of a bounded axis.
fn bounded_index(v: f64, lo: f64, hi: f64, n: usize) -> Option<usize> {
    if !(v >= lo && v <= hi) {
        return None;
    }
    let i = ((v - lo) / ((hi - lo) / n as f64)).floor() as usize;
    Some(i.min(n - 1))
}

fn uniform_center(lo: f64, hi: f64, n: usize, i: usize) -> f64 {
    lo + (i as f64 + 0.5) * ((hi - lo) / n as f64)
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[1] > r[0]) {
        return Err(Error::config(format!("{name}: invalid range {r:?}")));
    }
    Ok(())
}

fn check_bins(bins: [usize; 3]) -> Result<()> {
    if bins.contains(&0) {
        return Err(Error::config(format!("bin counts must be >= 1, got {bins:?}")));
    }
    Ok(())
}

fn check_index(idx: [usize; 3], bins: [usize; 3]) -> Result<()> {
    if (0..3).any(|d| idx[d] >= bins[d]) {
        return Err(Error::Index(format!("{idx:?} outside bins {bins:?}")));
    }
    Ok(())
}

/// Cylindrical grid over `(r, θ, z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolarGridSpec {
    pub r_range: [f64; 2],
    pub theta_range: [f64; 2],
    pub z_range: [f64; 2],
    /// `(R, A, Z)` bin counts.
    pub bins: [usize; 3],
    /// Optional monotone radial bin edges (`R + 1` values from `r_min` to
    /// `r_max`). Uniform radial bins when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radial_edges: Option<Vec<f64>>,
}

impl PolarGridSpec {
    pub fn new(r_range: [f64; 2], z_range: [f64; 2], bins: [usize; 3]) -> Result<Self> {
        let spec = Self {
            r_range,
            theta_range: [-PI, PI],
            z_range,
            bins,
            radial_edges: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `1024 × 1344 × 80` bins over `[0.3, 73.0] m × [−π, π] × [−5, 3] m`.
    pub fn paper() -> Self {
        Self::new([0.3, 73.0], [-5.0, 3.0], [1024, 1344, 80]).unwrap()
    }

    /// `64 × 84 × 10` bins; the radial limit circumscribes the desk
    /// Cartesian output range.
    pub fn desk() -> Self {
        Self::new([0.3, 18.3], [-5.0, 3.0], [64, 84, 10]).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        check_range("grid.polar.r_range", self.r_range)?;
        check_range("grid.polar.z_range", self.z_range)?;
        check_bins(self.bins)?;
        if self.r_range[0] <= 0.0 {
            return Err(Error::config("grid.polar.r_range: r_min must be > 0"));
        }
        let span = self.theta_range[1] - self.theta_range[0];
        if (span - TAU).abs() > 1e-12 {
            return Err(Error::config(format!(
                "grid.polar.theta_range must span 2π, spans {span}"
            )));
        }
        if let Some(edges) = &self.radial_edges {
            let ok = edges.len() == self.bins[0] + 1
                && edges.windows(2).all(|w| w[1] > w[0])
                && edges[0] == self.r_range[0]
                && edges[edges.len() - 1] == self.r_range[1];
            if !ok {
                return Err(Error::config(
                    "grid.polar.radial_edges must be R+1 increasing values spanning r_range",
                ));
            }
        }
        Ok(())
    }

    /// `(Δr, Δθ, Δz)` for uniform binning (Δr is the mean width with edges).
    pub fn widths(&self) -> [f64; 3] {
        [
            (self.r_range[1] - self.r_range[0]) / self.bins[0] as f64,
            TAU / self.bins[1] as f64,
            (self.z_range[1] - self.z_range[0]) / self.bins[2] as f64,
        ]
    }

    pub fn num_voxels(&self) -> usize {
        self.bins.iter().product()
    }

    fn radial_index(&self, r: f64) -> Option<usize> {
        match &self.radial_edges {
            None => bounded_index(r, self.r_range[0], self.r_range[1], self.bins[0]),
            Some(edges) => {
                if !(r >= edges[0] && r <= edges[edges.len() - 1]) {
                    return None;
                }
                let i = edges.partition_point(|&e| e <= r);
                Some(i.saturating_sub(1).min(self.bins[0] - 1))
            }
        }
    }

    fn azimuth_index(&self, theta: f64) -> usize {
        let a = self.bins[1];
        let i = ((theta - self.theta_range[0]).rem_euclid(TAU) / (TAU / a as f64)).floor() as usize;
        i.min(a - 1)
    }

    pub fn voxel_index(&self, p: PolarPoint) -> Option<[usize; 3]> {
        let ir = self.radial_index(p.r)?;
        let iz = bounded_index(p.z, self.z_range[0], self.z_range[1], self.bins[2])?;
        Some([ir, self.azimuth_index(p.theta), iz])
    }

    pub fn radial_center(&self, i: usize) -> f64 {
        match &self.radial_edges {
            None => uniform_center(self.r_range[0], self.r_range[1], self.bins[0], i),
            Some(e) => 0.5 * (e[i] + e[i + 1]),
        }
    }

    pub fn voxel_center(&self, idx: [usize; 3]) -> Result<PolarPoint> {
        check_index(idx, self.bins)?;
        Ok(self.center_unchecked(idx))
    }

    pub(crate) fn center_unchecked(&self, idx: [usize; 3]) -> PolarPoint {
        let theta = uniform_center(self.theta_range[0], self.theta_range[1], self.bins[1], idx[1]);
        PolarPoint {
            r: self.radial_center(idx[0]),
            theta: normalize_angle(theta),
            z: uniform_center(self.z_range[0], self.z_range[1], self.bins[2], idx[2]),
        }
    }

    /// Continuous index with bin `i`'s center at `u = i`. The azimuth
    /// component is in `[-0.5, A - 0.5)`.
    pub fn continuous_index(&self, p: PolarPoint) -> [f64; 3] {
        let [_, wa, wz] = self.widths();
        let ua = (p.theta - self.theta_range[0]).rem_euclid(TAU) / wa - 0.5;
        let uz = (p.z - self.z_range[0]) / wz - 0.5;
        [self.radial_continuous(p.r), ua, uz]
    }

    fn radial_continuous(&self, r: f64) -> f64 {
        match &self.radial_edges {
            None => (r - self.r_range[0]) / self.widths()[0] - 0.5,
            Some(e) => {
                let n = self.bins[0];
                let c = |i: usize| 0.5 * (e[i] + e[i + 1]);
                if n == 1 || r <= c(0) {
                    return (r - c(0)) / (e[1] - e[0]);
                }
                if r >= c(n - 1) {
                    return (n - 1) as f64 + (r - c(n - 1)) / (e[n] - e[n - 1]);
                }
                let j = (0..n - 1).rfind(|&j| c(j) <= r).unwrap_or(0);
                j as f64 + (r - c(j)) / (c(j + 1) - c(j))
            }
        }
    }

    /// Inverse of [`Self::continuous_index`] along the radial axis.
    pub fn radius_at(&self, u: f64) -> f64 {
        match &self.radial_edges {
            None => self.r_range[0] + (u + 0.5) * self.widths()[0],
            Some(e) => {
                let n = self.bins[0];
                let c = |i: usize| 0.5 * (e[i] + e[i + 1]);
                if n == 1 || u <= 0.0 {
                    return c(0) + u * (e[1] - e[0]);
                }
                if u >= (n - 1) as f64 {
                    return c(n - 1) + (u - (n - 1) as f64) * (e[n] - e[n - 1]);
                }
                let j = u.floor() as usize;
                c(j) + (u - j as f64) * (c(j + 1) - c(j))
            }
        }
    }

    pub fn downsampled(&self, stride: [usize; 3]) -> Result<Self> {
        let bins = downsample_bins(self.bins, stride)?;
        let radial_edges = self
            .radial_edges
            .as_ref()
            .map(|e| e.iter().step_by(stride[0]).copied().collect());
        Ok(Self {
            bins,
            radial_edges,
            ..self.clone()
        })
    }
}

fn downsample_bins(bins: [usize; 3], stride: [usize; 3]) -> Result<[usize; 3]> {
    if stride.contains(&0) || (0..3).any(|d| bins[d] % stride[d] != 0) {
        return Err(Error::config(format!(
            "stride {stride:?} does not divide bins {bins:?}"
        )));
    }
    Ok([bins[0] / stride[0], bins[1] / stride[1], bins[2] / stride[2]])
}

/// Axis-aligned Cartesian grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CartesianGridSpec {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z_range: [f64; 2],
    /// `(X, Y, Z)` bin counts.
    pub bins: [usize; 3],
}

impl CartesianGridSpec {
    pub fn new(x_range: [f64; 2], y_range: [f64; 2], z_range: [f64; 2], bins: [usize; 3]) -> Result<Self> {
        let spec = Self {
            x_range,
            y_range,
            z_range,
            bins,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `512 × 512 × 40` voxels of 0.2 m over `[−51.2, 51.2]² × [−5, 3]`.
    pub fn paper() -> Self {
        Self::new([-51.2, 51.2], [-51.2, 51.2], [-5.0, 3.0], [512, 512, 40]).unwrap()
    }

    /// `64 × 64 × 10` voxels (0.4 m × 0.4 m × 0.8 m) over `[−12.8, 12.8]² × [−5, 3]`.
    pub fn desk() -> Self {
        Self::new([-12.8, 12.8], [-12.8, 12.8], [-5.0, 3.0], [64, 64, 10]).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        check_range("grid.cartesian.x_range", self.x_range)?;
        check_range("grid.cartesian.y_range", self.y_range)?;
        check_range("grid.cartesian.z_range", self.z_range)?;
        check_bins(self.bins)
    }

    fn ranges(&self) -> [[f64; 2]; 3] {
        [self.x_range, self.y_range, self.z_range]
    }

    pub fn widths(&self) -> [f64; 3] {
        let r = self.ranges();
        [0, 1, 2].map(|d| (r[d][1] - r[d][0]) / self.bins[d] as f64)
    }

    pub fn num_voxels(&self) -> usize {
        self.bins.iter().product()
    }

    pub fn voxel_index(&self, p: CartPoint) -> Option<[usize; 3]> {
        let r = self.ranges();
        let v = [p.x, p.y, p.z];
        let mut idx = [0; 3];
        for d in 0..3 {
            idx[d] = bounded_index(v[d], r[d][0], r[d][1], self.bins[d])?;
        }
        Some(idx)
    }

    pub fn voxel_center(&self, idx: [usize; 3]) -> Result<CartPoint> {
        check_index(idx, self.bins)?;
        Ok(self.center_unchecked(idx))
    }

    pub(crate) fn center_unchecked(&self, idx: [usize; 3]) -> CartPoint {
        let r = self.ranges();
        let c = [0, 1, 2].map(|d| uniform_center(r[d][0], r[d][1], self.bins[d], idx[d]));
        CartPoint::new(c[0], c[1], c[2])
    }

    pub fn continuous_index(&self, p: CartPoint) -> [f64; 3] {
        let r = self.ranges();
        let w = self.widths();
        let v = [p.x, p.y, p.z];
        [0, 1, 2].map(|d| (v[d] - r[d][0]) / w[d] - 0.5)
    }

    pub fn coord_at(&self, axis: usize, u: f64) -> f64 {
        self.ranges()[axis][0] + (u + 0.5) * self.widths()[axis]
    }

    pub fn downsampled(&self, stride: [usize; 3]) -> Result<Self> {
        Ok(Self {
            bins: downsample_bins(self.bins, stride)?,
            ..self.clone()
        })
    }

    /// Largest bird's-eye radius of any voxel center.
    pub fn max_center_radius(&self) -> f64 {
        let w = self.widths();
        let fx = self.x_range[0].abs().max(self.x_range[1].abs()) - 0.5 * w[0];
        let fy = self.y_range[0].abs().max(self.y_range[1].abs()) - 0.5 * w[1];
        fx.hypot(fy)
    }
}

/// Either kind of working grid a feature volume can live on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridSpec {
    Polar(PolarGridSpec),
    Cartesian(CartesianGridSpec),
}

impl GridSpec {
    pub fn bins(&self) -> [usize; 3] {
        match self {
            GridSpec::Polar(s) => s.bins,
            GridSpec::Cartesian(s) => s.bins,
        }
    }

    pub fn num_voxels(&self) -> usize {
        self.bins().iter().product()
    }

    pub fn is_polar(&self) -> bool {
        matches!(self, GridSpec::Polar(_))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            GridSpec::Polar(s) => s.validate(),
            GridSpec::Cartesian(s) => s.validate(),
        }
    }

    /// Azimuth wraps on polar grids; everything else is zero padded.
    pub fn padding(&self) -> [Padding; 3] {
        match self {
            GridSpec::Polar(_) => [Padding::Zero, Padding::Wrap, Padding::Zero],
            GridSpec::Cartesian(_) => [Padding::Zero; 3],
        }
    }

    pub fn flat(&self, idx: [usize; 3]) -> usize {
        let b = self.bins();
        (idx[0] * b[1] + idx[1]) * b[2] + idx[2]
    }

    pub fn unflat(&self, flat: usize) -> [usize; 3] {
        let b = self.bins();
        [flat / (b[1] * b[2]), (flat / b[2]) % b[1], flat % b[2]]
    }

    pub fn index_of(&self, p: CartPoint) -> Option<[usize; 3]> {
        match self {
            GridSpec::Polar(s) => s.voxel_index(cart_to_polar(p)),
            GridSpec::Cartesian(s) => s.voxel_index(p),
        }
    }

    pub fn center_cart(&self, idx: [usize; 3]) -> CartPoint {
        match self {
            GridSpec::Polar(s) => polar_to_cart(s.center_unchecked(idx)),
            GridSpec::Cartesian(s) => s.center_unchecked(idx),
        }
    }

    pub fn center_polar(&self, idx: [usize; 3]) -> PolarPoint {
        match self {
            GridSpec::Polar(s) => s.center_unchecked(idx),
            GridSpec::Cartesian(s) => cart_to_polar(s.center_unchecked(idx)),
        }
    }

    /// Continuous index (centers at integers) of a Cartesian point.
    pub fn continuous_index(&self, p: CartPoint) -> [f64; 3] {
        match self {
            GridSpec::Polar(s) => s.continuous_index(cart_to_polar(p)),
            GridSpec::Cartesian(s) => s.continuous_index(p),
        }
    }

    pub fn downsampled(&self, stride: [usize; 3]) -> Result<Self> {
        Ok(match self {
            GridSpec::Polar(s) => GridSpec::Polar(s.downsampled(stride)?),
            GridSpec::Cartesian(s) => GridSpec::Cartesian(s.downsampled(stride)?),
        })
    }

    /// The point's coordinates along this grid's own axes: `(r, θ, z)` or
    /// `(x, y, z)`.
    pub fn native_coords(&self, p: CartPoint) -> [f64; 3] {
        match self {
            GridSpec::Polar(_) => {
                let q = cart_to_polar(p);
                [q.r, q.theta, q.z]
            }
            GridSpec::Cartesian(_) => [p.x, p.y, p.z],
        }
    }
}
