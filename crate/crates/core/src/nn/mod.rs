//! Differentiable primitives with hand-derived backward passes.

mod activation;
mod adam;
mod conv;
mod fc;
pub mod gradcheck;
mod loss;

pub use activation::{relu, relu_backward};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use conv::{col2im, conv2d_backward, conv2d_forward, im2col};
pub use fc::{fc_backward, fc_forward};
pub use gradcheck::{finite_diff_entries, finite_diff_grad, max_relative_error, relative_error};
pub use loss::mse_loss;

use crate::tensor::Tensor;

/// Gradients of a scalar loss with respect to one layer's parameters and input.
#[derive(Clone, Debug)]
pub struct LayerGrads<T> {
    pub grad_weights: Tensor<T>,
    pub grad_bias: Tensor<T>,
    pub grad_input: Tensor<T>,
}
