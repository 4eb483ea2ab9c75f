mod common;

use common::*;
use proptest::prelude::*;
use pvo::tensor::*;
use pvo::{Array, Tensor};

const ZWZ: [Padding; 3] = [Padding::Zero, Padding::Wrap, Padding::Zero];

#[test]
fn matmul_examples() {
    let eye = Array::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = Array::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(matmul(&eye, &m).unwrap(), m);
    let a = Array::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
    let b = Array::from_f64(&[2, 1], &[3.0, 4.0]).unwrap();
    assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);

    let mut g = rng(1);
    let a = random(&[3, 4], &mut g);
    let b = random(&[4, 2], &mut g);
    let c = matmul(&a, &b).unwrap();
    let oracle = naive_matmul(a.data(), b.data(), 3, 4, 2);
    for (x, y) in c.data().iter().zip(&oracle) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[2, 3]);
    let e = matmul(&a, &b).unwrap_err().to_string();
    assert!(e.contains("[2, 3]"), "{e}");
}

#[test]
fn softmax_examples() {
    let y = softmax(&Array::from_f64(&[3], &[0.0, 0.0, 0.0]).unwrap()).unwrap();
    assert!(y.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    let y = softmax(&Array::from_f64(&[2], &[1000.0, 0.0]).unwrap()).unwrap();
    assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1].abs() < 1e-12);
    let y = softmax(&Array::from_f64(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap()).unwrap();
    for (v, e) in y.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((v - e).abs() < 1e-15);
    }
    let bad = Array::from_f64(&[2], &[f64::NAN, 0.0]).unwrap();
    assert!(matches!(softmax(&bad), Err(pvo::Error::Numeric(_))));
}

#[test]
fn relu_examples() {
    let x = Array::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap();
    assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    assert!(relu(&Array::from_f64(&[2], &[-3.0, -0.5]).unwrap()).data().iter().all(|v| *v == 0.0));
    let x = Array::from_f64(&[3], &[3.0, -3.0, 0.0]).unwrap();
    let g = Array::from_f64(&[3], &[5.0, 5.0, 5.0]).unwrap();
    assert_eq!(relu_backward(&x, &g).unwrap().data(), &[5.0, 0.0, 0.0]);
}

#[test]
fn conv3d_examples() {
    let mut g = rng(2);
    let x = random(&[4, 5, 3, 2], &mut g);
    assert_eq!(conv3d(&x, &delta_kernel([3, 3, 3], 2), ZWZ).unwrap(), x);

    let x1 = random(&[3, 4, 2, 1], &mut g);
    let two = Array::from_f64(&[1, 1, 1, 1, 1], &[2.0]).unwrap();
    assert_eq!(conv3d(&x1, &two, ZWZ).unwrap(), x1.scale(2.0));

    let k = random(&[3, 3, 3, 2, 1], &mut g);
    for pad in [ZWZ, [Padding::Zero; 3], [Padding::Wrap; 3]] {
        let y = conv3d(&x, &k, pad).unwrap();
        let o = naive_conv3d(&x, &k, pad);
        assert!(max_abs_diff(&y, &o) < 1e-10);
    }
}

#[test]
fn conv3d_rejects_even_kernels_and_channel_mismatch() {
    let x = Tensor::<f64>::zeros(&[2, 2, 2, 1]);
    assert!(matches!(
        conv3d(&x, &Tensor::zeros(&[2, 3, 3, 1, 1]), ZWZ),
        Err(pvo::Error::Config(_))
    ));
    assert!(matches!(
        conv3d(&x, &Tensor::zeros(&[3, 3, 3, 2, 1]), ZWZ),
        Err(pvo::Error::Dimension { .. })
    ));
}

#[test]
fn finite_diff_examples() {
    let x = Array::from_f64(&[2], &[1.0, 2.0]).unwrap();
    let g = finite_diff_grad(|t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum(), &x, None).unwrap();
    assert!((g.data()[0] - 2.0).abs() < 1e-6 && (g.data()[1] - 4.0).abs() < 1e-6);
    let g = finite_diff_grad(|_: &Tensor<f64>| 7.0, &x, None).unwrap();
    assert!(g.data().iter().all(|v| *v == 0.0));

    let mut r = rng(3);
    let c = random(&[5], &mut r);
    let x = random(&[5], &mut r);
    let fd = finite_diff_grad(|t| softmax(t).unwrap().dot(&c).unwrap(), &x, None).unwrap();
    let an = softmax_backward(&softmax(&x).unwrap(), &c).unwrap();
    assert!(max_abs_diff(&fd, &an) < 1e-6);

    assert!(finite_diff_grad(|_: &Tensor<f64>| f64::NAN, &x, None).is_err());
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn backward_passes_match_finite_differences() {
    let mut r = rng(4);
    // matmul
    let a = random(&[3, 4], &mut r);
    let b = random(&[4, 2], &mut r);
    let w = random(&[3, 2], &mut r);
    let (da, db) = matmul_backward(&a, &b, &w).unwrap();
    let fa = finite_diff_grad(|t| matmul(t, &b).unwrap().dot(&w).unwrap(), &a, None).unwrap();
    let fb = finite_diff_grad(|t| matmul(&a, t).unwrap().dot(&w).unwrap(), &b, None).unwrap();
    assert!(max_relative_error(&da, &fa).unwrap() <= 1e-4);
    assert!(max_relative_error(&db, &fb).unwrap() <= 1e-4);

    // softmax over rows
    let x = random(&[3, 4], &mut r);
    let w = random(&[3, 4], &mut r);
    let an = softmax_backward(&softmax(&x).unwrap(), &w).unwrap();
    let fd = finite_diff_grad(|t| softmax(t).unwrap().dot(&w).unwrap(), &x, None).unwrap();
    assert!(max_relative_error(&an, &fd).unwrap() <= 1e-4);

    // relu (random inputs avoid the kink)
    let x = random(&[10], &mut r);
    let w = random(&[10], &mut r);
    let an = relu_backward(&x, &w).unwrap();
    let fd = finite_diff_grad(|t| relu(t).dot(&w).unwrap(), &x, None).unwrap();
    assert!(max_relative_error(&an, &fd).unwrap() <= 1e-4);

    // conv3d
    let x = random(&[4, 5, 3, 2], &mut r);
    let k = random(&[3, 1, 3, 2, 3], &mut r);
    let w = random(&[4, 5, 3, 3], &mut r);
    let (dx, dk) = conv3d_backward(&x, &k, ZWZ, &w).unwrap();
    let fx = finite_diff_grad(|t| conv3d(t, &k, ZWZ).unwrap().dot(&w).unwrap(), &x, None).unwrap();
    let fk = finite_diff_grad(|t| conv3d(&x, t, ZWZ).unwrap().dot(&w).unwrap(), &k, None).unwrap();
    assert!(max_relative_error(&dx, &fx).unwrap() <= 1e-4);
    assert!(max_relative_error(&dk, &fk).unwrap() <= 1e-4);

    // average pooling
    let x = random(&[4, 6, 2, 2], &mut r);
    let w = random(&[2, 3, 1, 2], &mut r);
    let an = avg_pool3d_backward(x.shape(), [2, 2, 2], &w).unwrap();
    let fd = finite_diff_grad(|t| avg_pool3d(t, [2, 2, 2]).unwrap().dot(&w).unwrap(), &x, None).unwrap();
    assert!(max_relative_error(&an, &fd).unwrap() <= 1e-4);
}

#[test]
fn pooling_rejects_indivisible_extents() {
    let x = Tensor::<f64>::zeros(&[3, 4, 2, 1]);
    assert!(matches!(avg_pool3d(&x, [2, 2, 1]), Err(pvo::Error::Config(_))));
}

#[test]
fn conv3d_wrap_axis_is_rotation_equivariant() {
    let mut r = rng(5);
    let x = random(&[3, 6, 2, 2], &mut r);
    let k = random(&[3, 3, 3, 2, 2], &mut r);
    let y = conv3d(&x, &k, ZWZ).unwrap();
    for s in 0..6 {
        let ys = conv3d(&roll_azimuth(&x, s), &k, ZWZ).unwrap();
        assert_eq!(ys, roll_azimuth(&y, s));
    }
}

#[test]
fn f32_kernels_agree_with_f64() {
    let mut r = rng(6);
    let x = random(&[3, 4, 2, 2], &mut r);
    let k = random(&[3, 3, 3, 2, 2], &mut r);
    let y64 = conv3d(&x, &k, ZWZ).unwrap();
    let y32 = conv3d(&x.cast::<f32>(), &k.cast::<f32>(), ZWZ).unwrap();
    assert!(max_abs_diff(&y64, &y32.cast()) < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(v in proptest::collection::vec(-1e3f64..1e3, 1..12)) {
        let n = v.len();
        let y = softmax(&Array::from_f64(&[n], &v).unwrap()).unwrap();
        prop_assert!(y.data().iter().all(|p| *p >= 0.0));
        prop_assert!((y.sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn conv3d_is_linear(seed in any::<u64>(), alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let mut r = rng(seed);
        let x = random(&[3, 4, 2, 2], &mut r);
        let y = random(&[3, 4, 2, 2], &mut r);
        let k = random(&[3, 3, 3, 2, 2], &mut r);
        let mut comb = x.scale(alpha);
        comb.axpy(beta, &y).unwrap();
        let lhs = conv3d(&comb, &k, ZWZ).unwrap();
        let mut rhs = conv3d(&x, &k, ZWZ).unwrap().scale(alpha);
        rhs.axpy(beta, &conv3d(&y, &k, ZWZ).unwrap()).unwrap();
        prop_assert!(max_abs_diff(&lhs, &rhs) <= 1e-12);
    }

    #[test]
    fn delta_kernel_is_identity(seed in any::<u64>(), c in 1usize..4) {
        let mut r = rng(seed);
        let x = random(&[3, 5, 2, c], &mut r);
        prop_assert_eq!(conv3d(&x, &delta_kernel([3, 3, 3], c), ZWZ).unwrap(), x);
    }
}
