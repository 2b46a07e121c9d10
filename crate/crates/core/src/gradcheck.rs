//! Central finite-difference gradient checking.

use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Entry-wise relative error with an absolute floor: `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Central-difference gradient of `f` with respect to every entry of `x`.
pub fn numeric_gradient(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = x.zeros_like();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Largest entry-wise relative error between two gradients, ignoring entries
/// where `skip(i)` is true.
pub fn max_relative_error(
    analytic: &Tensor,
    numeric: &Tensor,
    floor: f64,
    skip: impl Fn(usize) -> bool,
) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .enumerate()
        .filter(|(i, _)| !skip(*i))
        .map(|(_, (&a, &n))| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}

/// `Σ dy ⊙ y`, the scalar whose gradient w.r.t. `y` is `dy`. Used to turn a
/// vector-valued layer into a scalar objective for checking.
pub fn contract(y: &Tensor, dy: &Tensor) -> f64 {
    y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum()
}
