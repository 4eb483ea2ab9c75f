use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Boundary handling for one spatial axis of [`conv3d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Zero,
    /// Circular axis (azimuth).
    Wrap,
}

impl Padding {
    #[inline]
    fn resolve(self, i: isize, n: usize) -> Option<usize> {
        match self {
            Padding::Zero => (i >= 0 && (i as usize) < n).then_some(i as usize),
            Padding::Wrap => Some(i.rem_euclid(n as isize) as usize),
        }
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = matmul_dims(a, b)?;
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// Gradients of `c = a·b` given `dc`: `(dc·bᵀ, aᵀ·dc)`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k, n) = matmul_dims(a, b)?;
    if dc.shape() != [m, n] {
        return Err(Error::Dimension {
            op: "matmul_backward",
            lhs: vec![m, n],
            rhs: dc.shape().to_vec(),
        });
    }
    let (ad, bd, gd) = (a.data(), b.data(), dc.data());
    let mut da = vec![T::zero(); m * k];
    let mut db = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &bd[p * n..(p + 1) * n];
            da[i * k + p] = grow.iter().zip(brow).map(|(&g, &bv)| g * bv).sum();
            let av = ad[i * k + p];
            for (d, &g) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *d += av * g;
            }
        }
    }
    Ok((Tensor::new(&[m, k], da)?, Tensor::new(&[k, n], db)?))
}

fn matmul_dims<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok((a.shape()[0], a.shape()[1], b.shape()[1]))
}

/// Softmax over the last axis, with max subtraction.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.data().iter().any(|v| v.is_nan() || *v == T::infinity()) {
        return Err(Error::Numeric("softmax input contains NaN or +inf".into()));
    }
    let n = *x.shape().last().unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        softmax_row(row);
    }
    Ok(out)
}

pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Backward of [`softmax`] from its output `y`: `y ⊙ (g − ⟨g, y⟩)` per row.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    y.same_shape(g, "softmax_backward")?;
    let n = *y.shape().last().unwrap();
    let mut out = g.clone();
    for (orow, yrow) in out.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
        let inner: T = orow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
        for (o, &yv) in orow.iter_mut().zip(yrow) {
            *o = yv * (*o - inner);
        }
    }
    Ok(out)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gate is 1 for `x > 0` and 0 otherwise (including `x == 0`).
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(g, |x, g| if x > T::zero() { g } else { T::zero() })
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

struct ConvGeometry {
    ext: [usize; 3],
    cin: usize,
    cout: usize,
    k: [usize; 3],
}

fn conv_geometry<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>) -> Result<ConvGeometry> {
    if input.rank() != 4 || kernel.rank() != 5 || kernel.shape()[3] != input.shape()[3] {
        return Err(Error::Dimension {
            op: "conv3d",
            lhs: input.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    let ks = kernel.shape();
    if ks[..3].iter().any(|&k| k % 2 == 0) {
        return Err(Error::config(format!(
            "conv3d kernel extents must be odd, got {:?}",
            &ks[..3]
        )));
    }
    let s = input.shape();
    Ok(ConvGeometry {
        ext: [s[0], s[1], s[2]],
        cin: s[3],
        cout: ks[4],
        k: [ks[0], ks[1], ks[2]],
    })
}

/// For each output position, the `(tap, input position)` pairs that
/// contribute along one axis.
fn forward_taps(n: usize, k: usize, pad: Padding) -> Vec<Vec<(usize, usize)>> {
    let h = (k / 2) as isize;
    (0..n)
        .map(|o| {
            (0..k)
                .filter_map(|t| pad.resolve(o as isize + t as isize - h, n).map(|i| (t, i)))
                .collect()
        })
        .collect()
}

/// For each input position, the `(tap, output position)` pairs that read it.
fn reverse_taps(n: usize, k: usize, pad: Padding) -> Vec<Vec<(usize, usize)>> {
    let h = (k / 2) as isize;
    (0..n)
        .map(|i| {
            (0..k)
                .filter_map(|t| pad.resolve(i as isize - t as isize + h, n).map(|o| (t, o)))
                .collect()
        })
        .collect()
}

/// Stride-1 "same" 3D cross-correlation (no kernel flip).
///
/// `input` is `[R, A, Z, Cin]`, `kernel` is `[kr, ka, kz, Cin, Cout]`; the
/// output is `[R, A, Z, Cout]`. Each output element accumulates over
/// `(tap_r, tap_a, tap_z, cin)` in lexicographic order regardless of thread
/// count.
pub fn conv3d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: [Padding; 3],
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, kernel)?;
    let [nr, na, nz] = g.ext;
    let (cin, cout) = (g.cin, g.cout);
    let taps: Vec<_> = (0..3).map(|d| forward_taps(g.ext[d], g.k[d], padding[d])).collect();
    let (x, kd) = (input.data(), kernel.data());
    let [_, ka, kz] = g.k;
    let mut out = vec![T::zero(); nr * na * nz * cout];
    out.par_chunks_mut(na * nz * cout)
        .enumerate()
        .for_each(|(r, slab)| {
            for &(tr, ir) in &taps[0][r] {
                for a in 0..na {
                    for &(ta, ia) in &taps[1][a] {
                        for z in 0..nz {
                            let o = &mut slab[(a * nz + z) * cout..(a * nz + z + 1) * cout];
                            for &(tz, iz) in &taps[2][z] {
                                let xo = ((ir * na + ia) * nz + iz) * cin;
                                let ko = ((tr * ka + ta) * kz + tz) * cin * cout;
                                for ci in 0..cin {
                                    let xv = x[xo + ci];
                                    if xv == T::zero() {
                                        continue;
                                    }
                                    let krow = &kd[ko + ci * cout..ko + (ci + 1) * cout];
                                    for (ov, &kv) in o.iter_mut().zip(krow) {
                                        *ov += xv * kv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor::new(&[nr, na, nz, cout], out)
}

/// Gradients of [`conv3d`] with respect to input and kernel.
pub fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: [Padding; 3],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = conv_geometry(input, kernel)?;
    let [nr, na, nz] = g.ext;
    let (cin, cout) = (g.cin, g.cout);
    if grad_out.shape() != [nr, na, nz, cout] {
        return Err(Error::Dimension {
            op: "conv3d_backward",
            lhs: vec![nr, na, nz, cout],
            rhs: grad_out.shape().to_vec(),
        });
    }
    let [_, ka, kz] = g.k;
    let (x, kd, gd) = (input.data(), kernel.data(), grad_out.data());

    // Input gradient, gathered per input voxel.
    let rtaps: Vec<_> = (0..3).map(|d| reverse_taps(g.ext[d], g.k[d], padding[d])).collect();
    let mut gin = vec![T::zero(); nr * na * nz * cin];
    gin.par_chunks_mut(na * nz * cin)
        .enumerate()
        .for_each(|(r, slab)| {
            for &(tr, or) in &rtaps[0][r] {
                for a in 0..na {
                    for &(ta, oa) in &rtaps[1][a] {
                        for z in 0..nz {
                            let gi = &mut slab[(a * nz + z) * cin..(a * nz + z + 1) * cin];
                            for &(tz, oz) in &rtaps[2][z] {
                                let go = &gd[((or * na + oa) * nz + oz) * cout..][..cout];
                                if go.iter().all(|v| *v == T::zero()) {
                                    continue;
                                }
                                let ko = ((tr * ka + ta) * kz + tz) * cin * cout;
                                for (ci, giv) in gi.iter_mut().enumerate() {
                                    let krow = &kd[ko + ci * cout..ko + (ci + 1) * cout];
                                    *giv += krow.iter().zip(go).map(|(&k, &g)| k * g).sum::<T>();
                                }
                            }
                        }
                    }
                }
            }
        });

    // Kernel gradient: per radial slab partials, reduced in slab order.
    let taps: Vec<_> = (0..3).map(|d| forward_taps(g.ext[d], g.k[d], padding[d])).collect();
    let klen = kernel.len();
    let partials: Vec<Vec<T>> = (0..nr)
        .into_par_iter()
        .map(|r| {
            let mut gk = vec![T::zero(); klen];
            for &(tr, ir) in &taps[0][r] {
                for a in 0..na {
                    for &(ta, ia) in &taps[1][a] {
                        for z in 0..nz {
                            let go = &gd[((r * na + a) * nz + z) * cout..][..cout];
                            for &(tz, iz) in &taps[2][z] {
                                let xo = ((ir * na + ia) * nz + iz) * cin;
                                let ko = ((tr * ka + ta) * kz + tz) * cin * cout;
                                for ci in 0..cin {
                                    let xv = x[xo + ci];
                                    if xv == T::zero() {
                                        continue;
                                    }
                                    let krow = &mut gk[ko + ci * cout..ko + (ci + 1) * cout];
                                    for (kv, &gv) in krow.iter_mut().zip(go) {
                                        *kv += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            gk
        })
        .collect();
    let mut gk = vec![T::zero(); klen];
    for p in partials {
        for (a, b) in gk.iter_mut().zip(p) {
            *a += b;
        }
    }
    Ok((
        Tensor::new(&[nr, na, nz, cin], gin)?,
        Tensor::new(kernel.shape(), gk)?,
    ))
}

/// Dense multiply count of one [`conv3d`] call.
pub fn conv3d_macs(input_extents: [usize; 3], kernel_shape: &[usize]) -> u64 {
    input_extents.iter().product::<usize>() as u64 * kernel_shape.iter().product::<usize>() as u64
}

/// Non-overlapping average pooling over the three spatial axes.
pub fn avg_pool3d<T: Scalar>(x: &Tensor<T>, stride: [usize; 3]) -> Result<Tensor<T>> {
    let (ext, c, out_ext) = pool_dims(x.shape(), stride)?;
    let norm = T::one() / T::lit((stride[0] * stride[1] * stride[2]) as f64);
    let mut out = Tensor::zeros(&[out_ext[0], out_ext[1], out_ext[2], c]);
    let od = out.data_mut();
    let xd = x.data();
    for r in 0..ext[0] {
        for a in 0..ext[1] {
            for z in 0..ext[2] {
                let o = ((r / stride[0] * out_ext[1] + a / stride[1]) * out_ext[2] + z / stride[2]) * c;
                let i = ((r * ext[1] + a) * ext[2] + z) * c;
                for ch in 0..c {
                    od[o + ch] += xd[i + ch];
                }
            }
        }
    }
    od.iter_mut().for_each(|v| *v *= norm);
    Ok(out)
}

pub fn avg_pool3d_backward<T: Scalar>(
    input_shape: &[usize],
    stride: [usize; 3],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (ext, c, out_ext) = pool_dims(input_shape, stride)?;
    if grad_out.shape() != [out_ext[0], out_ext[1], out_ext[2], c] {
        return Err(Error::Dimension {
            op: "avg_pool3d_backward",
            lhs: vec![out_ext[0], out_ext[1], out_ext[2], c],
            rhs: grad_out.shape().to_vec(),
        });
    }
    let norm = T::one() / T::lit((stride[0] * stride[1] * stride[2]) as f64);
    let gd = grad_out.data();
    let mut gin = Tensor::zeros(input_shape);
    let gi = gin.data_mut();
    for r in 0..ext[0] {
        for a in 0..ext[1] {
            for z in 0..ext[2] {
                let o = ((r / stride[0] * out_ext[1] + a / stride[1]) * out_ext[2] + z / stride[2]) * c;
                let i = ((r * ext[1] + a) * ext[2] + z) * c;
                for ch in 0..c {
                    gi[i + ch] = gd[o + ch] * norm;
                }
            }
        }
    }
    Ok(gin)
}

fn pool_dims(shape: &[usize], stride: [usize; 3]) -> Result<([usize; 3], usize, [usize; 3])> {
    if shape.len() != 4 {
        return Err(Error::config(format!("pooling needs a rank-4 volume, got {shape:?}")));
    }
    let ext = [shape[0], shape[1], shape[2]];
    if stride.contains(&0) || (0..3).any(|d| ext[d] % stride[d] != 0) {
        return Err(Error::config(format!(
            "pooling stride {stride:?} does not divide extents {ext:?}"
        )));
    }
    Ok((ext, shape[3], [ext[0] / stride[0], ext[1] / stride[1], ext[2] / stride[2]]))
}
