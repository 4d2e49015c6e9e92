//! Central-difference gradient checking.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default perturbation for 32-bit parameters.
pub const DEFAULT_EPSILON: f32 = 1e-3;

/// Lower bound on the denominator of the relative error.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Central-difference estimate of `d objective / d t[i]` for every element.
pub fn numeric_gradient<T, F>(t: &Tensor<T>, epsilon: T, mut objective: F) -> Vec<f64>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> f64,
{
    let mut probe = t.clone();
    (0..t.len())
        .map(|i| {
            let orig = t.data()[i];
            probe.data_mut()[i] = orig + epsilon;
            let plus = objective(&probe);
            probe.data_mut()[i] = orig - epsilon;
            let minus = objective(&probe);
            probe.data_mut()[i] = orig;
            // use the step actually representable in f32
            let step = (orig + epsilon).as_f64() - (orig - epsilon).as_f64();
            (plus - minus) / step
        })
        .collect()
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-6)`.
pub fn max_relative_error<T: Scalar>(analytic: &[T], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let a = a.as_f64();
            (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR)
        })
        .fold(0.0, f64::max)
}

/// `sum_i weights_i * y_i` accumulated in f64; the scalar objective used to
/// turn a layer output into a loss with upstream gradient `weights`.
pub fn projected_sum<T: Scalar>(y: &Tensor<T>, weights: &Tensor<T>) -> f64 {
    y.data()
        .iter()
        .zip(weights.data())
        .map(|(&a, &b)| a.as_f64() * b.as_f64())
        .sum()
}
