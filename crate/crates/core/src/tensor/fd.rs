use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Central-difference gradient of a scalar function.
///
/// The step for element `i` is `h · max(1, |x_i|)`; `h` defaults to `1e-4`.
pub fn finite_diff_grad<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    h: Option<f64>,
) -> Result<Tensor<T>> {
    let h = h.unwrap_or(1e-4);
    if !(h > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let xi = x.data()[i];
        let step = T::lit(h * xi.as_f64().abs().max(1.0));
        probe.data_mut()[i] = xi + step;
        let plus = f(&probe);
        probe.data_mut()[i] = xi - step;
        let minus = f(&probe);
        probe.data_mut()[i] = xi;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite function value while probing element {i}"
            )));
        }
        // The realized step may differ from `step` after rounding.
        let span = (xi + step) - (xi - step);
        grad.data_mut()[i] = (plus - minus) / span;
    }
    Ok(grad)
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn max_relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.same_shape(b, "max_relative_error")?;
    Ok(a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| relative_error(x.as_f64(), y.as_f64()))
        .fold(0.0, f64::max))
}
