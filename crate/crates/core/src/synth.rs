//! Procedural scenes built from labeled solids, their voxel ground truth, a
//! ray-cast LiDAR and a class-conditioned camera feature volume.
//!
//! The sensor sits at the origin. All randomness is drawn from ChaCha
//! streams keyed by ray or voxel index, so parallel evaluation is
//! bit-reproducible.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CartPoint, CartesianGridSpec, GridSpec, PolarGridSpec};
use crate::head::{SemanticGrid, FREE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::voxelize::{FeatureVolume, LidarPoint, PointCloud};

pub const N_CLASSES: usize = 8;
pub const CLASS_NAMES: [&str; N_CLASSES] =
    ["free", "road", "sidewalk", "terrain", "building", "car", "pole", "vegetation"];

pub const ROAD: u16 = 1;
pub const SIDEWALK: u16 = 2;
pub const TERRAIN: u16 = 3;
pub const BUILDING: u16 = 4;
pub const CAR: u16 = 5;
pub const POLE: u16 = 6;
pub const VEGETATION: u16 = 7;

/// LiDAR return intensity per class.
pub const REFLECTANCE: [f64; N_CLASSES] = [0.0, 0.15, 0.3, 0.25, 0.45, 0.8, 0.6, 0.35];

/// Standard deviation of the simulated range noise in meters.
pub const RANGE_NOISE: f64 = 0.02;

/// Ray parameters closer than this are treated as starting inside a solid.
const T_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Axis-aligned box given by its corners.
    Slab { min: [f64; 3], max: [f64; 3] },
    /// Box rotated by `yaw` about the vertical axis.
    Box { center: [f64; 3], size: [f64; 3], yaw: f64 },
    /// Vertical cylinder.
    Cylinder { center: [f64; 2], radius: f64, z_range: [f64; 2] },
    /// Thin box along the segment `start → end`.
    Wall { start: [f64; 2], end: [f64; 2], thickness: f64, z_range: [f64; 2] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub class: u16,
    #[serde(flatten)]
    pub shape: Shape,
}

#[derive(Clone, Copy, Debug)]
enum Solid {
    Box { center: [f64; 3], half: [f64; 3], cos: f64, sin: f64 },
    Cylinder { center: [f64; 2], radius: f64, z_range: [f64; 2] },
}

impl Shape {
    fn solid(&self) -> Solid {
        let oriented = |center: [f64; 3], size: [f64; 3], yaw: f64| Solid::Box {
            center,
            half: size.map(|s| 0.5 * s),
            cos: yaw.cos(),
            sin: yaw.sin(),
        };
        match *self {
            Shape::Slab { min, max } => {
                oriented(std::array::from_fn(|a| 0.5 * (min[a] + max[a])), std::array::from_fn(|a| max[a] - min[a]), 0.0)
            }
            Shape::Box { center, size, yaw } => oriented(center, size, yaw),
            Shape::Cylinder { center, radius, z_range } => Solid::Cylinder { center, radius, z_range },
            Shape::Wall { start, end, thickness, z_range } => {
                let (dx, dy) = (end[0] - start[0], end[1] - start[1]);
                oriented(
                    [0.5 * (start[0] + end[0]), 0.5 * (start[1] + end[1]), 0.5 * (z_range[0] + z_range[1])],
                    [dx.hypot(dy), thickness, z_range[1] - z_range[0]],
                    dy.atan2(dx),
                )
            }
        }
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match self.solid() {
            Solid::Box { center, half, cos, sin } => {
                let ex = half[0] * cos.abs() + half[1] * sin.abs();
                let ey = half[0] * sin.abs() + half[1] * cos.abs();
                (
                    [center[0] - ex, center[1] - ey, center[2] - half[2]],
                    [center[0] + ex, center[1] + ey, center[2] + half[2]],
                )
            }
            Solid::Cylinder { center, radius, z_range } => (
                [center[0] - radius, center[1] - radius, z_range[0]],
                [center[0] + radius, center[1] + radius, z_range[1]],
            ),
        }
    }

    /// Closed containment test.
    pub fn contains(&self, p: CartPoint) -> bool {
        match self.solid() {
            Solid::Box { center, half, cos, sin } => {
                let (dx, dy) = (p.x - center[0], p.y - center[1]);
                let lx = cos * dx + sin * dy;
                let ly = -sin * dx + cos * dy;
                lx.abs() <= half[0] && ly.abs() <= half[1] && (p.z - center[2]).abs() <= half[2]
            }
            Solid::Cylinder { center, radius, z_range } => {
                (p.x - center[0]).hypot(p.y - center[1]) <= radius && p.z >= z_range[0] && p.z <= z_range[1]
            }
        }
    }

    /// Parameter interval `[t_in, t_out]` where `o + t·d` lies inside.
    fn ray_interval(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, f64)> {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        fn clip(lo: &mut f64, hi: &mut f64, o: f64, d: f64, a: f64, b: f64) -> bool {
            if d == 0.0 {
                return o >= a && o <= b;
            }
            let (t1, t2) = ((a - o) / d, (b - o) / d);
            *lo = lo.max(t1.min(t2));
            *hi = hi.min(t1.max(t2));
            *lo <= *hi
        }
        match self.solid() {
            Solid::Box { center, half, cos, sin } => {
                let (ox, oy) = (o[0] - center[0], o[1] - center[1]);
                let lo_ = [cos * ox + sin * oy, -sin * ox + cos * oy, o[2] - center[2]];
                let ld = [cos * d[0] + sin * d[1], -sin * d[0] + cos * d[1], d[2]];
                for a in 0..3 {
                    if !clip(&mut lo, &mut hi, lo_[a], ld[a], -half[a], half[a]) {
                        return None;
                    }
                }
            }
            Solid::Cylinder { center, radius, z_range } => {
                let (ox, oy) = (o[0] - center[0], o[1] - center[1]);
                let a = d[0] * d[0] + d[1] * d[1];
                let c = ox * ox + oy * oy - radius * radius;
                if a == 0.0 {
                    if c > 0.0 {
                        return None;
                    }
                } else {
                    let b = ox * d[0] + oy * d[1];
                    let disc = b * b - a * c;
                    if disc < 0.0 {
                        return None;
                    }
                    let s = disc.sqrt();
                    lo = (-b - s) / a;
                    hi = (-b + s) / a;
                }
                if !clip(&mut lo, &mut hi, o[2], d[2], z_range[0], z_range[1]) {
                    return None;
                }
            }
        }
        (lo <= hi).then_some((lo, hi))
    }

    /// Distance along the ray to the first surface crossing into the
    /// solid. Solids that already contain the ray origin are not hit.
    pub fn ray_entry(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        let (lo, _) = self.ray_interval(o, d)?;
        (lo > T_EPS).then_some(lo)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    pub fn empty(seed: u64) -> Self {
        SceneSpec { seed, primitives: Vec::new() }
    }

    pub fn validate(&self, grid: &CartesianGridSpec, n_classes: usize) -> Result<()> {
        let lo = [grid.x_range[0], grid.y_range[0], grid.z_range[0]];
        let hi = [grid.x_range[1], grid.y_range[1], grid.z_range[1]];
        for (i, p) in self.primitives.iter().enumerate() {
            if p.class == FREE || p.class as usize >= n_classes {
                return Err(Error::config(format!("primitive {i}: class {} outside [1, {n_classes})", p.class)));
            }
            let (a, b) = p.shape.bounds();
            let tol = 1e-9;
            if (0..3).any(|k| !(a[k] >= lo[k] - tol && b[k] <= hi[k] + tol && a[k] <= b[k])) {
                return Err(Error::config(format!("primitive {i} leaves the grid range")));
            }
        }
        Ok(())
    }

    /// Class of the last primitive containing `p`, or free.
    pub fn label_at(&self, p: CartPoint) -> u16 {
        self.primitives.iter().rev().find(|q| q.shape.contains(p)).map_or(FREE, |q| q.class)
    }

    /// Nearest surface entry along the ray with the class of the solid hit.
    pub fn first_hit(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, u16)> {
        let mut best: Option<(f64, u16)> = None;
        for p in &self.primitives {
            if let Some(t) = p.shape.ray_entry(o, d) {
                if best.is_none_or(|(b, _)| t < b) {
                    best = Some((t, p.class));
                }
            }
        }
        best
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Sensor height above the ground surface in the generated scenes.
const GROUND_TOP: f64 = -1.8;

/// Street-like scene: terrain, a road through the sensor with sidewalks,
/// buildings and vegetation beside it, cars on it and poles along it. Every
/// solid stays inside `grid` and clear of the sensor, provided the grid
/// spans the ground surface 1.8 m below the sensor.
pub fn random_scene(seed: u64, grid: &CartesianGridSpec) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [x0, x1] = grid.x_range;
    let [y0, y1] = grid.y_range;
    let zb = grid.z_range[0];
    let ztop = grid.z_range[1];
    let mut prims = vec![Primitive {
        class: TERRAIN,
        shape: Shape::Slab { min: [x0, y0, zb], max: [x1, y1, GROUND_TOP - 0.2] },
    }];

    // Work in a road frame: the road runs along `u`, across is `v`.
    let along_x = rng.random_bool(0.5);
    let (u0, u1, v0, v1) = if along_x { (x0, x1, y0, y1) } else { (y0, y1, x0, x1) };
    let to_xy = |u: f64, v: f64| if along_x { [u, v] } else { [v, u] };
    let slab = |ua: f64, ub: f64, va: f64, vb: f64, za: f64, zc: f64| {
        let (a, b) = (to_xy(ua, va), to_xy(ub, vb));
        Shape::Slab { min: [a[0].min(b[0]), a[1].min(b[1]), za], max: [a[0].max(b[0]), a[1].max(b[1]), zc] }
    };
    let road_half = rng.random_range(2.5..4.0);
    let offset = rng.random_range(-1.0..1.0);
    let (rl, rh) = (offset - road_half, offset + road_half);
    let walk = rng.random_range(1.5..2.5);
    prims.push(Primitive { class: ROAD, shape: slab(u0, u1, rl, rh, zb, GROUND_TOP) });
    for (a, b) in [(rl - walk, rl), (rh, rh + walk)] {
        prims.push(Primitive { class: SIDEWALK, shape: slab(u0, u1, a.max(v0), b.min(v1), zb, GROUND_TOP + 0.15) });
    }
    let yaw_road = if along_x { 0.0 } else { PI / 2.0 };
    let margin = 0.5;

    // Buildings and vegetation on both sides beyond the sidewalks.
    for side in [-1.0, 1.0] {
        let inner = if side < 0.0 { rl - walk } else { rh + walk };
        let mut u = u0 + rng.random_range(0.0..3.0);
        while u < u1 - 3.0 {
            let len = rng.random_range(3.0f64..7.0).min(u1 - margin - u);
            if len < 2.0 {
                break;
            }
            let gap = rng.random_range(0.5..2.0);
            let depth = rng.random_range(2.0..5.0);
            let set_back = rng.random_range(0.5..2.0);
            let (va, vb) = if side < 0.0 {
                ((inner - set_back - depth).max(v0 + margin), inner - set_back)
            } else {
                (inner + set_back, (inner + set_back + depth).min(v1 - margin))
            };
            if vb - va > 1.0 {
                if rng.random_bool(0.65) {
                    let h = rng.random_range(3.0f64..8.0).min(ztop - GROUND_TOP);
                    let c = to_xy(u + 0.5 * len, 0.5 * (va + vb));
                    let size = if along_x { [len, vb - va, h] } else { [vb - va, len, h] };
                    let jitter = rng.random_range(-0.15..0.15);
                    prims.push(Primitive {
                        class: BUILDING,
                        shape: fit_box([c[0], c[1], GROUND_TOP + 0.5 * h], size, jitter, grid),
                    });
                } else {
                    let r = (0.5 * (vb - va)).min(0.5 * len).clamp(0.6, 2.0);
                    let c = to_xy(u + 0.5 * len, 0.5 * (va + vb));
                    let h = rng.random_range(1.5..4.5);
                    prims.push(Primitive {
                        class: VEGETATION,
                        shape: Shape::Cylinder { center: c, radius: r, z_range: [GROUND_TOP - 0.2, (GROUND_TOP + h).min(ztop)] },
                    });
                }
            }
            u += len + gap;
        }
    }

    // Poles along the sidewalks.
    for side in [-1.0, 1.0] {
        let v = if side < 0.0 { rl - 0.5 * walk } else { rh + 0.5 * walk };
        let n = rng.random_range(1..4);
        for _ in 0..n {
            let Some(u) = pick(&mut rng, u0 + 1.0, u1 - 1.0) else { break };
            if u.abs() < 1.5 && v.abs() < 1.5 {
                continue;
            }
            prims.push(Primitive {
                class: POLE,
                shape: Shape::Cylinder {
                    center: to_xy(u, v),
                    radius: rng.random_range(0.2..0.35),
                    z_range: [GROUND_TOP - 0.2, (GROUND_TOP + rng.random_range(3.0..5.0)).min(ztop)],
                },
            });
        }
    }

    // Cars on the road, kept away from the sensor.
    let n_cars = rng.random_range(2..6);
    for _ in 0..n_cars {
        let lane = if rng.random_bool(0.5) { rl + 1.2 } else { rh - 1.2 };
        let Some(u) = pick(&mut rng, u0 + 3.0, u1 - 3.0) else { break };
        if u.abs() < 3.5 {
            continue;
        }
        let c = to_xy(u, lane);
        let h = rng.random_range(1.4..1.9);
        let yaw = yaw_road + rng.random_range(-0.3..0.3);
        prims.push(Primitive {
            class: CAR,
            shape: fit_box([c[0], c[1], GROUND_TOP + 0.5 * h], [rng.random_range(3.8..4.8), 1.8, h], yaw, grid),
        });
    }

    // An occasional wall segment across a corner.
    if rng.random_bool(0.5) {
        let side = if rng.random_bool(0.5) { v0 + 1.0 } else { v1 - 1.0 };
        if let Some(ua) = pick(&mut rng, u0 + 1.0, 0.0) {
            let ub = (ua + rng.random_range(4.0..10.0)).min(u1 - 1.0);
            let (a, b) = (to_xy(ua, side), to_xy(ub, side));
            prims.push(Primitive {
                class: BUILDING,
                shape: Shape::Wall {
                    start: a,
                    end: b,
                    thickness: 0.4,
                    z_range: [GROUND_TOP - 0.2, (GROUND_TOP + 2.5).min(ztop)],
                },
            });
        }
    }

    SceneSpec { seed, primitives: prims }
}

/// Uniform draw from `[lo, hi)`, or `None` when the interval is empty.
fn pick(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Option<f64> {
    (lo < hi).then(|| rng.random_range(lo..hi))
}

/// Oriented box, shrunk where needed so its footprint stays inside `grid`.
fn fit_box(center: [f64; 3], mut size: [f64; 3], yaw: f64, grid: &CartesianGridSpec) -> Shape {
    let mut c = center;
    for _ in 0..8 {
        let s = Shape::Box { center: c, size, yaw };
        let (lo, hi) = s.bounds();
        let (gx, gy) = (grid.x_range, grid.y_range);
        if lo[0] >= gx[0] && hi[0] <= gx[1] && lo[1] >= gy[0] && hi[1] <= gy[1] {
            return s;
        }
        c[0] = c[0].clamp(gx[0] + 0.5 * (hi[0] - lo[0]), gx[1] - 0.5 * (hi[0] - lo[0]));
        c[1] = c[1].clamp(gy[0] + 0.5 * (hi[1] - lo[1]), gy[1] - 0.5 * (hi[1] - lo[1]));
        size[0] *= 0.9;
        size[1] *= 0.9;
    }
    Shape::Box { center: c, size, yaw }
}

/// Labels every voxel of `spec` by the primitive containing its center.
pub fn rasterize_truth(scene: &SceneSpec, spec: &CartesianGridSpec) -> SemanticGrid {
    let grid = GridSpec::Cartesian(spec.clone());
    let labels = (0..spec.num_voxels())
        .into_par_iter()
        .map(|f| scene.label_at(grid.center_cart(grid.unflat(f))))
        .collect();
    SemanticGrid { spec: spec.clone(), n_classes: N_CLASSES, labels }
}

/// Beam lattice of the simulated spinning sensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    /// Elevation span of the beams in degrees; beams sit at the centers of
    /// equal sub-intervals.
    pub elevation_deg: [f64; 2],
    pub max_range: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        SensorModel { elevation_deg: [-30.0, 10.0], max_range: 80.0 }
    }
}

impl SensorModel {
    /// Unit direction of beam `b` at azimuth step `j`.
    pub fn direction(&self, b: usize, n_beams: usize, j: usize, per_beam: usize) -> [f64; 3] {
        let [e0, e1] = self.elevation_deg;
        let e = (e0 + (e1 - e0) * (b as f64 + 0.5) / n_beams as f64).to_radians();
        let a = -PI + TAU * (j as f64 + 0.5) / per_beam as f64;
        [e.cos() * a.cos(), e.cos() * a.sin(), e.sin()]
    }
}

pub fn simulate_lidar(scene: &SceneSpec, n_beams: usize, points_per_beam: usize, seed: u64) -> PointCloud {
    simulate_lidar_with(scene, &SensorModel::default(), n_beams, points_per_beam, seed)
}

/// Casts one ray per lattice cell and keeps the first hit, perturbed along
/// the ray by Gaussian range noise truncated at three standard deviations.
pub fn simulate_lidar_with(
    scene: &SceneSpec,
    sensor: &SensorModel,
    n_beams: usize,
    points_per_beam: usize,
    seed: u64,
) -> PointCloud {
    let noise = Normal::new(0.0, RANGE_NOISE).unwrap();
    let points = (0..n_beams * points_per_beam)
        .into_par_iter()
        .filter_map(|ray| {
            let d = sensor.direction(ray / points_per_beam, n_beams, ray % points_per_beam, points_per_beam);
            let (t, class) = scene.first_hit([0.0; 3], d)?;
            if t > sensor.max_range {
                return None;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(ray as u64);
            let t = t + truncated(&noise, &mut rng);
            Some(LidarPoint::new(d[0] * t, d[1] * t, d[2] * t, REFLECTANCE[class as usize]))
        })
        .collect();
    PointCloud::new(points)
}

/// Range noise redrawn until it falls within three standard deviations.
fn truncated(noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let e = noise.sample(rng);
        if e.abs() <= 3.0 * RANGE_NOISE {
            return e;
        }
    }
}

/// Fixed per-class feature direction shared by every scene.
pub fn class_embedding(class: u16, channels: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_c1a5);
    rng.set_stream(class as u64);
    (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Standard deviation of the per-voxel camera feature noise.
pub const CAMERA_NOISE: f64 = 0.1;

/// Camera features on the polar grid: each voxel whose center lies in a
/// solid gets that class's embedding plus seeded noise; others are zero.
pub fn synthesize_camera_volume<T: Scalar>(
    scene: &SceneSpec,
    spec: &PolarGridSpec,
    channels: usize,
    seed: u64,
) -> FeatureVolume<T> {
    synthesize_camera_on(scene, &GridSpec::Polar(spec.clone()), channels, seed)
}

/// [`synthesize_camera_volume`] on either grid kind.
pub fn synthesize_camera_on<T: Scalar>(scene: &SceneSpec, grid: &GridSpec, channels: usize, seed: u64) -> FeatureVolume<T> {
    let grid = grid.clone();
    let n_table = scene.primitives.iter().map(|p| p.class + 1).max().unwrap_or(0);
    let table: Vec<Vec<f64>> = (0..n_table).map(|c| class_embedding(c, channels)).collect();
    let noise = Normal::new(0.0, CAMERA_NOISE).unwrap();
    let per_voxel: Vec<(bool, Vec<T>)> = (0..grid.num_voxels())
        .into_par_iter()
        .map(|f| {
            let class = scene.label_at(grid.center_cart(grid.unflat(f)));
            if class == FREE {
                return (false, vec![T::zero(); channels]);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(f as u64);
            let v = table[class as usize].iter().map(|b| T::lit(b + noise.sample(&mut rng))).collect();
            (true, v)
        })
        .collect();
    let [a, b, c] = grid.bins();
    let mut data = Vec::with_capacity(grid.num_voxels() * channels);
    let mut mask = Vec::with_capacity(grid.num_voxels());
    for (m, v) in per_voxel {
        mask.push(m);
        data.extend(v);
    }
    FeatureVolume { grid, data: Tensor::new(&[a, b, c, channels], data).expect("shape matches"), mask }
}
