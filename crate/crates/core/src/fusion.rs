//! Gated fusion of the LiDAR and camera volumes:
//! `F = W ⊙ F_L + (1 − W) ⊙ F_C` with a one-channel gate
//! `W = sigmoid(conv3d([F_L, F_C]) + b)` shared by all channels of a voxel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{conv3d, conv3d_backward, sigmoid, Padding, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// The camera volume is ignored and `F = F_L`.
    #[default]
    LidarOnly,
    Fused,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T> {
    /// `[3, 3, 3, 2C, 1]`.
    pub gate_kernel: Tensor<T>,
    /// `[1]`.
    pub gate_bias: Tensor<T>,
}

impl<T: Scalar> FusionParams<T> {
    pub fn new(channels: usize, mut init: impl FnMut(&[usize]) -> Tensor<T>) -> Self {
        FusionParams { gate_kernel: init(&[3, 3, 3, 2 * channels, 1]), gate_bias: Tensor::zeros(&[1]) }
    }

    pub fn zeros(channels: usize) -> Self {
        Self::new(channels, Tensor::zeros)
    }

    /// Parameters whose gate is the constant `sigmoid(bias)`.
    pub fn constant_gate(channels: usize, bias: T) -> Self {
        let mut p = Self::zeros(channels);
        p.gate_bias.data_mut()[0] = bias;
        p
    }
}

fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let s = a.shape();
    let c = s[3];
    let mut out = Vec::with_capacity(a.len() * 2);
    for (ra, rb) in a.data().chunks_exact(c).zip(b.data().chunks_exact(c)) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    Tensor::new(&[s[0], s[1], s[2], 2 * c], out).expect("valid shape")
}

fn check<T: Scalar>(fl: &Tensor<T>, fc: &Tensor<T>, params: &FusionParams<T>) -> Result<()> {
    if fl.shape() != fc.shape() || fl.rank() != 4 {
        return Err(Error::config(format!(
            "fusion inputs differ: {:?} vs {:?}",
            fl.shape(),
            fc.shape()
        )));
    }
    let c = fl.shape()[3];
    if params.gate_kernel.shape() != [3, 3, 3, 2 * c, 1] || params.gate_bias.shape() != [1] {
        return Err(Error::config(format!(
            "gate kernel {:?} does not fit {c} channels",
            params.gate_kernel.shape()
        )));
    }
    Ok(())
}

/// Returns the fused volume and the gate `[R, A, Z, 1]`.
pub fn modal_fuse<T: Scalar>(
    fl: &Tensor<T>,
    fc: &Tensor<T>,
    params: &FusionParams<T>,
    padding: [Padding; 3],
) -> Result<(Tensor<T>, Tensor<T>)> {
    check(fl, fc, params)?;
    let c = fl.shape()[3];
    let bias = params.gate_bias.data()[0];
    let gate = conv3d(&concat_channels(fl, fc), &params.gate_kernel, padding)?.map(|v| sigmoid(v + bias));
    let mut out = fl.clone();
    for (v, w) in gate.data().iter().enumerate() {
        let range = v * c..(v + 1) * c;
        for (o, b) in out.data_mut()[range.clone()].iter_mut().zip(&fc.data()[range]) {
            *o = *w * *o + (T::one() - *w) * *b;
        }
    }
    Ok((out, gate))
}

/// Gradients for `F_L`, `F_C` and the gate parameters.
pub fn modal_fuse_backward<T: Scalar>(
    fl: &Tensor<T>,
    fc: &Tensor<T>,
    params: &FusionParams<T>,
    padding: [Padding; 3],
    gate: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, FusionParams<T>)> {
    check(fl, fc, params)?;
    fl.same_shape(grad_out, "fusion backward")?;
    let c = fl.shape()[3];
    let mut gl = Tensor::zeros(fl.shape());
    let mut gc = Tensor::zeros(fl.shape());
    let mut gpre = Tensor::zeros(gate.shape());
    for (v, w) in gate.data().iter().enumerate() {
        let mut gw = T::zero();
        for k in v * c..(v + 1) * c {
            let g = grad_out.data()[k];
            gl.data_mut()[k] = *w * g;
            gc.data_mut()[k] = (T::one() - *w) * g;
            gw += g * (fl.data()[k] - fc.data()[k]);
        }
        gpre.data_mut()[v] = gw * *w * (T::one() - *w);
    }
    let (gcat, gk) = conv3d_backward(&concat_channels(fl, fc), &params.gate_kernel, padding, &gpre)?;
    for (v, row) in gcat.data().chunks_exact(2 * c).enumerate() {
        for ch in 0..c {
            gl.data_mut()[v * c + ch] += row[ch];
            gc.data_mut()[v * c + ch] += row[c + ch];
        }
    }
    let gb = Tensor::new(&[1], vec![gpre.sum()])?;
    Ok((gl, gc, FusionParams { gate_kernel: gk, gate_bias: gb }))
}
