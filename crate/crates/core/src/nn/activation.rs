use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `grad_out` where `cached_x > 0`; zero elsewhere, including at exactly 0.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, cached_x: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.shape() != cached_x.shape() {
        return Err(Error::dim("relu_backward", grad_out.shape(), cached_x.shape()));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(cached_x.data())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(grad_out.shape(), data)
}
