//! Central finite differences and relative-error comparison.

use crate::tensor::{Scalar, Tensor};

/// Denominator floor for relative error: components whose magnitudes are
/// both below this are compared on an absolute scale of this size.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `(f(t+εeᵢ) − f(t−εeᵢ)) / 2ε` for every element `i` of `t`.
pub fn finite_diff_gradient<T, F>(mut f: F, t: &Tensor<T>, epsilon: f64) -> Tensor<T>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> T,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    let eps = T::lit(epsilon);
    let mut probe = t.clone();
    let mut out = Tensor::zeros(t.shape());
    for i in 0..t.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (eps + eps);
    }
    out
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Largest elementwise [`relative_error`] between two same-shaped tensors.
pub fn max_relative_error<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a.as_f64(), n.as_f64()))
        .fold(0.0, f64::max)
}
