//! Point clouds and their conversion into dense per-voxel feature volumes.
//!
//! Each occupied voxel stores ten channels: the mean of its points'
//! `(r, θ, x, y, z, i)`, the mean offset of the points from the voxel center
//! along the grid's own axes, and `ln(1 + count)`. Empty voxels are zero.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cart_to_polar, normalize_angle, CartPoint, GridSpec};
use crate::scalar::Scalar;
use crate::tensor::{read_array, write_array, Tensor};

/// Number of channels produced by [`voxelize_points`].
pub const POINT_FEATURES: usize = 10;

pub const CH_R: usize = 0;
pub const CH_THETA: usize = 1;
pub const CH_X: usize = 2;
pub const CH_Y: usize = 3;
pub const CH_Z: usize = 4;
pub const CH_INTENSITY: usize = 5;
pub const CH_OFFSET: usize = 6;
pub const CH_LOG_COUNT: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    pub r: f64,
    pub theta: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub i: f64,
}

impl LidarPoint {
    /// Builds a point from Cartesian coordinates, filling in the polar pair.
    pub fn new(x: f64, y: f64, z: f64, i: f64) -> Self {
        let p = cart_to_polar(CartPoint { x, y, z });
        LidarPoint { r: p.r, theta: p.theta, x, y, z, i }
    }

    pub fn cart(&self) -> CartPoint {
        CartPoint { x: self.x, y: self.y, z: self.z }
    }

    fn features(&self) -> [f64; 6] {
        [self.r, self.theta, self.x, self.y, self.z, self.i]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
}

impl PointCloud {
    pub fn new(points: Vec<LidarPoint>) -> Self {
        PointCloud { points }
    }

    pub fn from_xyzi(rows: impl IntoIterator<Item = [f64; 4]>) -> Self {
        PointCloud {
            points: rows.into_iter().map(|[x, y, z, i]| LidarPoint::new(x, y, z, i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn write_csv_to<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["x", "y", "z", "i"]).map_err(csv_err)?;
        for p in &self.points {
            wr.write_record([p.x, p.y, p.z, p.i].map(|v| format!("{v:?}")))
                .map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv_from<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let header: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
        if header != ["x", "y", "z", "i"] {
            return Err(Error::Format(format!("expected header x,y,z,i, got {}", header.join(","))));
        }
        let mut rows = Vec::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let mut v = [0.0; 4];
            for (k, field) in rec.iter().enumerate() {
                if k >= 4 {
                    return Err(Error::Format(format!("row {}: too many fields", line + 1)));
                }
                v[k] = field
                    .parse()
                    .map_err(|_| Error::Format(format!("row {}: bad number {field:?}", line + 1)))?;
            }
            if rec.len() != 4 {
                return Err(Error::Format(format!("row {}: expected 4 fields", line + 1)));
            }
            rows.push(v);
        }
        Ok(Self::from_xyzi(rows))
    }

    /// N×4 array of `x, y, z, i`.
    pub fn to_array(&self) -> Result<Tensor<f64>> {
        let data = self.points.iter().flat_map(|p| [p.x, p.y, p.z, p.i]).collect();
        Tensor::new(&[self.len(), 4], data)
    }

    pub fn from_array(a: &Tensor<f64>) -> Result<Self> {
        if a.rank() != 2 || a.shape()[1] != 4 {
            return Err(Error::Format(format!("point array must be N×4, got {:?}", a.shape())));
        }
        Ok(Self::from_xyzi(a.data().chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]])))
    }

    /// Reads CSV when the extension is `.csv`, the binary array format
    /// otherwise.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if is_csv(path) {
            Self::read_csv_from(BufReader::new(File::open(path)?))
        } else {
            Self::from_array(&read_array(path)?)
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if is_csv(path) {
            let mut w = BufWriter::new(File::create(path)?);
            self.write_csv_to(&mut w)?;
            w.flush()?;
            Ok(())
        } else {
            write_array(path, &self.to_array()?)
        }
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Dense `[R, A, Z, C]` features on a grid plus the occupancy mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume<T> {
    pub grid: GridSpec,
    pub data: Tensor<T>,
    pub mask: Vec<bool>,
}

impl<T: Scalar> FeatureVolume<T> {
    pub fn zeros(grid: GridSpec, channels: usize) -> Self {
        let [a, b, c] = grid.bins();
        let n = grid.num_voxels();
        FeatureVolume { grid, data: Tensor::zeros(&[a, b, c, channels]), mask: vec![false; n] }
    }

    /// Wraps an existing tensor; the mask is set wherever a voxel has any
    /// nonzero channel.
    pub fn from_data(grid: GridSpec, data: Tensor<T>) -> Result<Self> {
        let b = grid.bins();
        if data.rank() != 4 || data.shape()[..3] != b {
            return Err(Error::Dimension {
                op: "feature volume",
                lhs: b.to_vec(),
                rhs: data.shape().to_vec(),
            });
        }
        let c = data.shape()[3];
        let mask = data.data().chunks_exact(c).map(|v| v.iter().any(|x| *x != T::zero())).collect();
        Ok(FeatureVolume { grid, data, mask })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn occupied(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Channel vector of one voxel.
    pub fn voxel(&self, idx: [usize; 3]) -> &[T] {
        let c = self.channels();
        let f = self.grid.flat(idx);
        &self.data.data()[f * c..(f + 1) * c]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelizeStats {
    pub in_range: usize,
    pub dropped: usize,
    pub occupied: usize,
}

/// Points grouped per voxel, each group in original point order.
struct Buckets {
    /// `start[v]..start[v + 1]` indexes `order`.
    start: Vec<usize>,
    order: Vec<usize>,
    dropped: usize,
}

fn bucket_points(pc: &PointCloud, grid: &GridSpec) -> Buckets {
    let n = grid.num_voxels();
    let cell: Vec<Option<usize>> = pc
        .points
        .iter()
        .map(|p| grid.index_of(p.cart()).map(|i| grid.flat(i)))
        .collect();
    let mut start = vec![0usize; n + 1];
    for v in cell.iter().flatten() {
        start[v + 1] += 1;
    }
    for v in 0..n {
        start[v + 1] += start[v];
    }
    let mut fill = start.clone();
    let mut order = vec![0usize; start[n]];
    for (k, v) in cell.iter().enumerate() {
        if let Some(v) = v {
            order[fill[*v]] = k;
            fill[*v] += 1;
        }
    }
    let dropped = cell.iter().filter(|c| c.is_none()).count();
    Buckets { start, order, dropped }
}

/// Mean-pools points into a ten-channel feature volume. Points outside the
/// grid are dropped and counted.
pub fn voxelize_points<T: Scalar>(pc: &PointCloud, grid: &GridSpec) -> (FeatureVolume<T>, VoxelizeStats) {
    let b = bucket_points(pc, grid);
    let mut vol = FeatureVolume::zeros(grid.clone(), POINT_FEATURES);
    let data = vol.data.data_mut();
    for v in 0..grid.num_voxels() {
        let members = &b.order[b.start[v]..b.start[v + 1]];
        if members.is_empty() {
            continue;
        }
        let idx = grid.unflat(v);
        let center = native_center(grid, idx);
        let mut acc = [0.0f64; 9];
        for &k in members {
            let p = &pc.points[k];
            let f = p.features();
            let native = grid.native_coords(p.cart());
            for c in 0..6 {
                acc[c] += f[c];
            }
            for d in 0..3 {
                acc[6 + d] += offset_along(grid, d, native[d], center[d]);
            }
        }
        let n = members.len() as f64;
        let out = &mut data[v * POINT_FEATURES..(v + 1) * POINT_FEATURES];
        for c in 0..9 {
            out[c] = T::lit(acc[c] / n);
        }
        out[CH_LOG_COUNT] = T::lit(n.ln_1p());
        vol.mask[v] = true;
    }
    let stats = VoxelizeStats {
        in_range: pc.len() - b.dropped,
        dropped: b.dropped,
        occupied: vol.occupied(),
    };
    (vol, stats)
}

fn native_center(grid: &GridSpec, idx: [usize; 3]) -> [f64; 3] {
    match grid {
        GridSpec::Polar(_) => {
            let c = grid.center_polar(idx);
            [c.r, c.theta, c.z]
        }
        GridSpec::Cartesian(_) => {
            let c = grid.center_cart(idx);
            [c.x, c.y, c.z]
        }
    }
}

fn offset_along(grid: &GridSpec, axis: usize, v: f64, center: f64) -> f64 {
    if grid.is_polar() && axis == 1 {
        normalize_angle(v - center)
    } else {
        v - center
    }
}

/// Point counts per voxel (flat order).
pub fn point_counts(pc: &PointCloud, grid: &GridSpec) -> Vec<usize> {
    let b = bucket_points(pc, grid);
    b.start.windows(2).map(|w| w[1] - w[0]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeBand {
    pub band: usize,
    pub r_lo: f64,
    pub r_hi: f64,
    pub occupied_voxels: usize,
    pub points: usize,
    pub points_per_occupied_voxel: f64,
}

/// Horizontal radius interval the range bands of a grid cover: the radial
/// range of a polar grid, `[0, farthest center]` of a Cartesian one.
pub fn band_extent(grid: &GridSpec) -> [f64; 2] {
    match grid {
        GridSpec::Polar(s) => s.r_range,
        GridSpec::Cartesian(s) => [0.0, s.max_center_radius()],
    }
}

/// Occupancy statistics with voxels split into `n_bands` equal-width bands
/// by the horizontal radius of their centers.
pub fn occupancy_histogram(pc: &PointCloud, grid: &GridSpec, n_bands: usize) -> Result<Vec<RangeBand>> {
    if n_bands == 0 {
        return Err(Error::config("need at least one range band"));
    }
    let [lo, hi] = band_extent(grid);
    let width = (hi - lo) / n_bands as f64;
    let mut bands: Vec<RangeBand> = (0..n_bands)
        .map(|k| RangeBand {
            band: k,
            r_lo: lo + k as f64 * width,
            r_hi: lo + (k + 1) as f64 * width,
            occupied_voxels: 0,
            points: 0,
            points_per_occupied_voxel: 0.0,
        })
        .collect();
    for (v, &count) in point_counts(pc, grid).iter().enumerate() {
        if count == 0 {
            continue;
        }
        let r = grid.center_cart(grid.unflat(v)).bev_radius();
        let k = (((r - lo) / width).floor().max(0.0) as usize).min(n_bands - 1);
        bands[k].occupied_voxels += 1;
        bands[k].points += count;
    }
    for b in &mut bands {
        if b.occupied_voxels > 0 {
            b.points_per_occupied_voxel = b.points as f64 / b.occupied_voxels as f64;
        }
    }
    Ok(bands)
}

/// Max over min of points-per-occupied-voxel across bands that have any
/// occupancy; 1 when fewer than two bands are occupied.
pub fn density_spread(bands: &[RangeBand]) -> f64 {
    let v: Vec<f64> = bands
        .iter()
        .filter(|b| b.occupied_voxels > 0)
        .map(|b| b.points_per_occupied_voxel)
        .collect();
    if v.len() < 2 {
        return 1.0;
    }
    let max = v.iter().cloned().fold(f64::MIN, f64::max);
    let min = v.iter().cloned().fold(f64::MAX, f64::min);
    max / min
}
