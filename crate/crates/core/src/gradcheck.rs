//! Central finite differences, the reference every analytic gradient is
//! checked against.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(f(θ + εeᵢ) − f(θ − εeᵢ)) / 2ε` for every coordinate `i` of `theta`.
pub fn finite_difference_gradient<F>(mut f: F, theta: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite_difference_gradient", "eps must be positive"));
    }
    let mut probe = theta.clone();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(theta.shape().to_vec(), grad)
}

/// Largest coordinate-wise relative error `|a − n| / max(|a|, |n|, floor)`.
///
/// The floor keeps coordinates whose true gradient is (near) zero from
/// dominating through round-off in the finite difference.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
