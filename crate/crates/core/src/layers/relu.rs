use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::simd::vectorized;
use crate::tensor::Tensor;

/// `max(0, x)` elementwise.
pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::from_parts(x.dims().to_vec(), data)
}

/// Passes `dout` through where the activation was positive. `x` may be either
/// the forward input or its output; both share the same positive set. The
/// gradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dout: &Tensor<T>) -> Result<Tensor<T>> {
    if x.dims() != dout.dims() {
        return Err(Error::shape(format!(
            "relu gradient {:?} does not match activation {:?}",
            dout.dims(),
            x.dims()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(dout.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor::from_parts(x.dims().to_vec(), data))
}

/// In-place `max(0, x)`.
pub(crate) fn forward_in_place<T: Scalar>(x: &mut [T]) {
    vectorized(|| {
        x.iter_mut().for_each(|v| *v = v.max(T::zero()));
    })
}

/// Zeroes `grad` wherever `act` is not positive.
pub(crate) fn mask_in_place<T: Scalar>(act: &[T], grad: &mut [T]) {
    vectorized(|| {
        for (g, &a) in grad.iter_mut().zip(act) {
            *g = if a > T::zero() { *g } else { T::zero() };
        }
    })
}
