mod common;

use std::f64::consts::PI;

use common::*;
use proptest::prelude::*;
use pvo::geometry::{CartPoint, CartesianGridSpec, GridSpec, PolarGridSpec, PolarPoint};
use pvo::head::*;
use pvo::tensor::{finite_diff_grad, max_relative_error};
use pvo::Tensor;
use rand::Rng;

fn polar_spec() -> PolarGridSpec {
    PolarGridSpec::new([1.0, 5.0], [0.0, 2.0], [4, 8, 4]).unwrap()
}

/// Point whose continuous index on `polar_spec` is `u`.
fn at_index(u: [f64; 3]) -> PolarPoint {
    PolarPoint::new(1.0 + (u[0] + 0.5), -PI + (u[1] + 0.5) * 2.0 * PI / 8.0, (u[2] + 0.5) * 0.5)
}

#[test]
fn voxel_centers_are_interpolation_nodes() {
    let s = polar_spec();
    let g = GridSpec::Polar(s.clone());
    let vol = random(&[4, 8, 4, 3], &mut rng(1));
    for r in 0..4 {
        for a in 0..8 {
            for z in 0..4 {
                let q = s.voxel_center([r, a, z]).unwrap();
                let f = trilinear_sample(&vol, &g, q).unwrap();
                for c in 0..3 {
                    assert!((f[c] - vol.get(&[r, a, z, c])).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn linear_index_fields_are_reproduced() {
    let g = GridSpec::Polar(polar_spec());
    let (a, b, c) = (0.7, -1.3, 2.1);
    let vol = Tensor::from_fn(&[4, 8, 4, 1], |f| {
        let (r, t, z) = (f / 32, (f / 4) % 8, f % 4);
        a * r as f64 + b * t as f64 + c * z as f64
    });
    let mut gen = rng(2);
    for _ in 0..200 {
        let u = [gen.random_range(0.0..3.0), gen.random_range(0.0..7.0), gen.random_range(0.0..3.0)];
        let v = trilinear_sample(&vol, &g, at_index(u)).unwrap()[0];
        assert!((v - (a * u[0] + b * u[1] + c * u[2])).abs() < 1e-9, "{u:?}");
    }
}

#[test]
fn azimuth_seam_blends_last_and_first_bins() {
    let g = GridSpec::Polar(polar_spec());
    let vol = random(&[4, 8, 4, 2], &mut rng(3));
    let mut gen = rng(4);
    for _ in 0..50 {
        let u = [gen.random_range(0.0..3.0), gen.random_range(7.0..7.999), gen.random_range(0.0..3.0)];
        let got = trilinear_sample(&vol, &g, at_index(u)).unwrap();
        // eight corners enumerated by hand; azimuth neighbors are 7 and 0
        let (r0, z0) = (u[0].floor() as usize, u[2].floor() as usize);
        let t = [u[0] - r0 as f64, u[1] - 7.0, u[2] - z0 as f64];
        let mut want = [0.0; 2];
        for (dr, wr) in [(0, 1.0 - t[0]), (1, t[0])] {
            for (ia, wa) in [(7, 1.0 - t[1]), (0, t[1])] {
                for (dz, wz) in [(0, 1.0 - t[2]), (1, t[2])] {
                    for c in 0..2 {
                        want[c] += wr * wa * wz * vol.get(&[(r0 + dr).min(3), ia, (z0 + dz).min(3), c]);
                    }
                }
            }
        }
        for c in 0..2 {
            assert!((got[c] - want[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn queries_outside_support_sample_zero_and_edges_clamp() {
    let s = polar_spec();
    let g = GridSpec::Polar(s.clone());
    let vol = Tensor::<f64>::filled(&[4, 8, 4, 1], 3.0);
    // within half a bin of the edge: clamped to the edge value
    assert_eq!(trilinear_sample(&vol, &g, PolarPoint::new(0.6, 0.0, 1.0)).unwrap(), vec![3.0]);
    assert_eq!(trilinear_sample(&vol, &g, PolarPoint::new(5.4, 0.0, 2.2)).unwrap(), vec![3.0]);
    // farther out: zero
    assert_eq!(trilinear_sample(&vol, &g, PolarPoint::new(0.4, 0.0, 1.0)).unwrap(), vec![0.0]);
    assert_eq!(trilinear_sample(&vol, &g, PolarPoint::new(3.0, 0.0, -0.3)).unwrap(), vec![0.0]);
}

#[test]
fn constant_volume_resamples_to_constant_on_support() {
    let g = GridSpec::Polar(polar_spec());
    let vol = Tensor::<f64>::filled(&[4, 8, 4, 2], 1.5);
    let out = CartesianGridSpec::new([-6.0, 6.0], [-6.0, 6.0], [0.0, 2.0], [24, 24, 4]).unwrap();
    let cart = polar_to_cartesian_grid(&vol, &g, &out).unwrap();
    assert_eq!(cart.shape(), &[24, 24, 4, 2]);
    let og = GridSpec::Cartesian(out.clone());
    let (mut inside, mut outside) = (0, 0);
    for f in 0..out.num_voxels() {
        let r = og.center_cart(og.unflat(f)).bev_radius();
        let v = &cart.data()[f * 2..f * 2 + 2];
        if r >= 1.0 && r <= 5.0 {
            assert_eq!(v, &[1.5, 1.5]);
            inside += 1;
        } else if r < 0.5 || r > 5.5 {
            assert_eq!(v, &[0.0, 0.0]);
            outside += 1;
        }
    }
    assert!(inside > 100 && outside > 100);
    // the precomputed plan agrees with the direct path
    let plan = ResamplePlan::new(&g, &out);
    assert_eq!(plan.apply(&vol).unwrap(), cart);
}

#[test]
fn paper_shapes_resample() {
    let g = GridSpec::Polar(PolarGridSpec::paper().downsampled([8, 8, 8]).unwrap());
    assert_eq!(g.bins(), [128, 168, 10]);
    let vol = Tensor::<f64>::filled(&[128, 168, 10, 1], 1.0);
    let out = polar_to_cartesian_grid(&vol, &g, &CartesianGridSpec::paper()).unwrap();
    assert_eq!(out.shape(), &[512, 512, 40, 1]);
}

#[test]
fn radial_field_matches_bev_radius() {
    let s = PolarGridSpec::new([0.3, 12.3], [0.0, 1.0], [120, 360, 1]).unwrap();
    let g = GridSpec::Polar(s.clone());
    let vol = Tensor::from_fn(&[120, 360, 1, 1], |f| s.radial_center(f / 360));
    let out = CartesianGridSpec::new([-8.0, 8.0], [-8.0, 8.0], [0.0, 1.0], [32, 32, 1]).unwrap();
    let cart = polar_to_cartesian_grid(&vol, &g, &out).unwrap();
    let og = GridSpec::Cartesian(out.clone());
    for f in 0..out.num_voxels() {
        let r = og.center_cart(og.unflat(f)).bev_radius();
        assert!((cart.data()[f] - r).abs() < 0.1, "r={r} got {}", cart.data()[f]);
    }
}

#[test]
fn sampling_gradient_matches_finite_differences() {
    let s = polar_spec();
    let g = GridSpec::Polar(s);
    let vol = random(&[4, 8, 4, 2], &mut rng(5));
    let q = at_index([1.3, 7.6, 2.2]);
    let w = [0.7, -1.1];
    let an = trilinear_sample_backward(vol.shape(), &g, q, &w).unwrap();
    let fd = finite_diff_grad(
        |t| trilinear_sample(t, &g, q).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum(),
        &vol,
        None,
    )
    .unwrap();
    assert!(max_relative_error(&an, &fd).unwrap() <= 1e-4);

    let out = CartesianGridSpec::new([-5.0, 5.0], [-5.0, 5.0], [0.0, 2.0], [6, 6, 2]).unwrap();
    let plan = ResamplePlan::new(&g, &out);
    let gw = random(&[6, 6, 2, 2], &mut rng(6));
    let an = plan.backward(&gw).unwrap();
    let fd = finite_diff_grad(|t| plan.apply(t).unwrap().dot(&gw).unwrap(), &vol, None).unwrap();
    assert!(max_relative_error(&an, &fd).unwrap() <= 1e-4);
}

#[test]
fn cartesian_source_grids_sample_without_wrap() {
    let src = CartesianGridSpec::new([-2.0, 2.0], [-2.0, 2.0], [0.0, 1.0], [4, 4, 1]).unwrap();
    let g = GridSpec::Cartesian(src.clone());
    let vol = random(&[4, 4, 1, 1], &mut rng(7));
    let out = polar_to_cartesian_grid(&vol, &g, &src).unwrap();
    assert!(out.data().iter().zip(vol.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    assert!(corners_for(&g, CartPoint::new(-3.0, 0.0, 0.5)).is_none());
}

#[test]
fn classify_examples() {
    let f = Tensor::<f64>::zeros(&[2, 2, 1, 3]);
    let (logits, labels) = classify(&f, &HeadParams::zeros(3, 4)).unwrap();
    assert!(logits.data().iter().all(|v| *v == 0.0));
    assert!(labels.iter().all(|l| *l == 0));

    let mut onehot = Tensor::<f64>::zeros(&[3, 1, 1, 3]);
    for v in 0..3 {
        onehot.set(&[v, 0, 0, 2 - v], 1.0);
    }
    let mut p = HeadParams::zeros(3, 3);
    for k in 0..3 {
        p.weight.set(&[k, k], 1.0);
    }
    assert_eq!(classify(&onehot, &p).unwrap().1, vec![2, 1, 0]);

    let mut g = rng(8);
    let f = random(&[2, 3, 2, 4], &mut g);
    let mut p = HeadParams::new(4, 5, |s| random(s, &mut g));
    p.bias = random(&[5], &mut g);
    let (logits, labels) = classify(&f, &p).unwrap();
    for v in 0..12 {
        let mut best = 0;
        let mut row = [0.0; 5];
        for k in 0..5 {
            row[k] = p.bias.data()[k] + (0..4).map(|c| f.data()[v * 4 + c] * p.weight.get(&[c, k])).sum::<f64>();
            assert!((logits.data()[v * 5 + k] - row[k]).abs() < 1e-12);
            if row[k] > row[best] {
                best = k;
            }
        }
        assert_eq!(labels[v] as usize, best);
    }
    assert!(matches!(classify(&f, &HeadParams::zeros(3, 5)), Err(pvo::Error::Config(_))));
}

#[test]
fn classifier_gradients_match_finite_differences() {
    let mut g = rng(9);
    let f = random(&[2, 2, 1, 3], &mut g);
    let p = HeadParams::new(3, 4, |s| random(s, &mut g));
    let w = random(&[2, 2, 1, 4], &mut g);
    let (gf, gp) = classify_backward(&f, &p, &w).unwrap();
    let fdf = finite_diff_grad(|t| classify(t, &p).unwrap().0.dot(&w).unwrap(), &f, None).unwrap();
    let fdw = finite_diff_grad(
        |t| classify(&f, &HeadParams { weight: t.clone(), bias: p.bias.clone() }).unwrap().0.dot(&w).unwrap(),
        &p.weight,
        None,
    )
    .unwrap();
    let fdb = finite_diff_grad(
        |t| classify(&f, &HeadParams { weight: p.weight.clone(), bias: t.clone() }).unwrap().0.dot(&w).unwrap(),
        &p.bias,
        None,
    )
    .unwrap();
    assert!(max_relative_error(&gf, &fdf).unwrap() <= 1e-4);
    assert!(max_relative_error(&gp.weight, &fdw).unwrap() <= 1e-4);
    assert!(max_relative_error(&gp.bias, &fdb).unwrap() <= 1e-4);
}

#[test]
fn cross_entropy_examples() {
    let mut logits = Tensor::<f64>::zeros(&[4, 3]);
    let target = [0u16, 2, 1, 2];
    for (v, t) in target.iter().enumerate() {
        logits.set(&[v, *t as usize], 50.0);
    }
    let (l, _) = cross_entropy_loss(&logits, &target, &[1.0; 3]).unwrap();
    assert!(l < 1e-20);

    let uniform = Tensor::<f64>::zeros(&[5, 17]);
    let (l, _) = cross_entropy_loss(&uniform, &[3; 5], &[1.0; 17]).unwrap();
    assert!((l - 17f64.ln()).abs() < 1e-12);

    let mut w = [1.0; 17];
    w[3] = 0.2;
    let (l, _) = cross_entropy_loss(&uniform, &[3, 3, 4, 4, 4], &w).unwrap();
    assert!((l - (0.4 + 3.0) / 5.0 * 17f64.ln()).abs() < 1e-12);

    assert!(matches!(cross_entropy_loss(&uniform, &[17; 5], &[1.0; 17]), Err(pvo::Error::Data(_))));
    assert!(cross_entropy_loss(&uniform, &[0; 5], &[-1.0; 17]).is_err());
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let logits = random(&[6, 4], &mut rng(10));
    let target = [0u16, 3, 1, 1, 2, 0];
    let w = [0.2, 1.0, 0.5, 2.0];
    let (_, an) = cross_entropy_loss(&logits, &target, &w).unwrap();
    let fd = finite_diff_grad(|t| cross_entropy_loss(t, &target, &w).unwrap().0, &logits, None).unwrap();
    assert!(max_relative_error(&an, &fd).unwrap() <= 1e-4);
}

#[test]
fn semantic_grid_round_trip() {
    let spec = CartesianGridSpec::new([-1.0, 1.0], [-1.0, 1.0], [0.0, 1.0], [2, 3, 2]).unwrap();
    let labels = vec![0, 1, 2, 3, 0, 0, 1, 1, 7, 0, 0, 5];
    let grid = SemanticGrid::new(spec.clone(), 8, labels).unwrap();
    let mut buf = Vec::new();
    grid.write_to(&mut buf).unwrap();
    assert_eq!(&buf[..7], b"PVOSEM1");
    assert_eq!(buf.len(), 7 + 12 + 24);
    assert_eq!(SemanticGrid::read_from(&mut &buf[..], spec.clone(), 8).unwrap(), grid);
    assert_eq!(grid.summary().class_counts, vec![5, 3, 1, 1, 0, 1, 0, 1]);
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(SemanticGrid::read_from(&mut &bad[..], spec.clone(), 8).is_err());
    assert!(SemanticGrid::read_from(&mut &buf[..20], spec.clone(), 8).is_err());
    assert!(SemanticGrid::new(spec, 4, vec![5; 12]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_are_a_partition_of_unity(u0 in 0.0f64..3.0, u1 in -0.5f64..7.5, u2 in 0.0f64..3.0) {
        let cs = corners_at([4, 8, 4], true, [u0, u1, u2]).unwrap();
        let w = cs.weights();
        prop_assert!(w.iter().all(|w| *w >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn samples_stay_in_corner_hull(seed in any::<u64>(), u0 in 0.0f64..3.0, u1 in 0.0f64..8.0, u2 in 0.0f64..3.0) {
        let g = GridSpec::Polar(polar_spec());
        let vol = random(&[4, 8, 4, 1], &mut rng(seed));
        let v = trilinear_sample(&vol, &g, at_index([u0, u1, u2])).unwrap()[0];
        let cs = corners_at([4, 8, 4], true, [u0, u1, u2]).unwrap();
        let lo = cs.idx.iter().map(|f| vol.data()[*f]).fold(f64::MAX, f64::min);
        let hi = cs.idx.iter().map(|f| vol.data()[*f]).fold(f64::MIN, f64::max);
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
    }

    #[test]
    fn argmax_ignores_constant_shifts(seed in any::<u64>(), shift in -100.0f64..100.0) {
        let mut g = rng(seed);
        let f = random(&[2, 2, 2, 3], &mut g);
        let mut p = HeadParams::new(3, 4, |s| random(s, &mut g));
        let (_, a) = classify(&f, &p).unwrap();
        p.bias.data_mut().iter_mut().for_each(|b| *b += shift);
        let (_, b) = classify(&f, &p).unwrap();
        prop_assert_eq!(a, b);
    }
}

