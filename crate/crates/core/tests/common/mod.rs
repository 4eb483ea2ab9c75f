//! Independent reference implementations used as test oracles. Nothing here
//! calls into the kernels it checks.
#![allow(dead_code)]

use pvo::tensor::Padding;
use pvo::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

pub fn random_nonneg(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Direct 7-loop cross-correlation, indexing through plain arithmetic.
pub fn naive_conv3d(x: &Tensor<f64>, k: &Tensor<f64>, pad: [Padding; 3]) -> Tensor<f64> {
    let s = x.shape();
    let ks = k.shape();
    let (nr, na, nz, cin, cout) = (s[0], s[1], s[2], s[3], ks[4]);
    let ext = [nr as isize, na as isize, nz as isize];
    let mut out = Tensor::zeros(&[nr, na, nz, cout]);
    for r in 0..nr {
        for a in 0..na {
            for z in 0..nz {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for tr in 0..ks[0] {
                        for ta in 0..ks[1] {
                            for tz in 0..ks[2] {
                                let pos = [
                                    r as isize + tr as isize - (ks[0] / 2) as isize,
                                    a as isize + ta as isize - (ks[1] / 2) as isize,
                                    z as isize + tz as isize - (ks[2] / 2) as isize,
                                ];
                                let mut idx = [0usize; 3];
                                let mut inside = true;
                                for d in 0..3 {
                                    match pad[d] {
                                        Padding::Zero => {
                                            if pos[d] < 0 || pos[d] >= ext[d] {
                                                inside = false;
                                            } else {
                                                idx[d] = pos[d] as usize;
                                            }
                                        }
                                        Padding::Wrap => {
                                            idx[d] = (((pos[d] % ext[d]) + ext[d]) % ext[d]) as usize
                                        }
                                    }
                                }
                                if !inside {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += x.get(&[idx[0], idx[1], idx[2], ci])
                                        * k.get(&[tr, ta, tz, ci, co]);
                                }
                            }
                        }
                    }
                    out.set(&[r, a, z, co], acc);
                }
            }
        }
    }
    out
}

pub fn delta_kernel(k: [usize; 3], c: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[k[0], k[1], k[2], c, c]);
    for ch in 0..c {
        t.set(&[k[0] / 2, k[1] / 2, k[2] / 2, ch, ch], 1.0);
    }
    t
}

/// Rotates a rank-4 volume by `s` positions along axis 1 (azimuth).
pub fn roll_azimuth(x: &Tensor<f64>, s: usize) -> Tensor<f64> {
    let sh = x.shape().to_vec();
    let mut out = Tensor::zeros(&sh);
    for r in 0..sh[0] {
        for a in 0..sh[1] {
            for z in 0..sh[2] {
                for c in 0..sh[3] {
                    out.set(&[r, (a + s) % sh[1], z, c], x.get(&[r, a, z, c]));
                }
            }
        }
    }
    out
}
