//! Three-layer convolutional refinement stack: conv -> ReLU -> conv -> ReLU -> conv.

use crate::error::{Error, Result};
use crate::models::TensorSet;
use crate::nn::{conv2d_backward, conv2d_forward, relu, relu_backward};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output channels and kernel sizes of the three layers. The stack reads
/// and writes a single channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackShape {
    pub channels: [usize; 3],
    pub kernels: [usize; 3],
}

impl StackShape {
    /// 64 maps at 11x11, 32 maps at 1x1, one map at 7x7.
    pub const DEFAULT: StackShape = StackShape {
        channels: [64, 32, 1],
        kernels: [11, 1, 7],
    };

    /// Reduced stack for fast gradient checks.
    pub const SMALL: StackShape = StackShape {
        channels: [8, 4, 1],
        kernels: [5, 1, 3],
    };

    pub fn validate(&self) -> Result<()> {
        if self.channels[2] != 1 || self.channels.contains(&0) {
            return Err(Error::config(format!(
                "stack channels {:?} must be positive and end in a single map",
                self.channels
            )));
        }
        if self.kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::config(format!("stack kernels {:?} must be odd", self.kernels)));
        }
        Ok(())
    }

    pub fn in_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            1
        } else {
            self.channels[layer - 1]
        }
    }

    /// Multiply-accumulates for one `side x side` pass.
    pub fn macs(&self, side: usize) -> u64 {
        (0..3)
            .map(|l| (self.channels[l] * self.in_channels(l) * self.kernels[l] * self.kernels[l]) as u64)
            .sum::<u64>()
            * (side * side) as u64
    }
}

impl Default for StackShape {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn zeros(out_channels: usize, in_channels: usize, k: usize) -> Self {
        ConvLayer {
            kernels: Tensor::zeros(&[out_channels, in_channels, k, k]),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    /// He-normal kernels, zero bias.
    fn he_normal(out_channels: usize, in_channels: usize, k: usize, rng: &mut SeededRng) -> Self {
        let std = (2.0 / (in_channels * k * k) as f64).sqrt();
        ConvLayer {
            kernels: Tensor::from_fn(&[out_channels, in_channels, k, k], |_| T::of(std * rng.normal())),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStackParams<T> {
    pub layers: [ConvLayer<T>; 3],
}

/// Activations retained by the forward pass: the input of every conv layer
/// and the two pre-ReLU outputs.
#[derive(Clone, Debug)]
pub struct ConvStackCache<T> {
    inputs: [Tensor<T>; 3],
    pre_activations: [Tensor<T>; 2],
}

impl<T: Scalar> ConvStackCache<T> {
    /// Sign pattern of every ReLU input; identifies the linear region the
    /// stack was evaluated in.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.pre_activations
            .iter()
            .flat_map(|t| t.data().iter().map(|&v| v > T::zero()))
            .collect()
    }
}

impl<T: Scalar> ConvStackParams<T> {
    pub fn zeros(shape: &StackShape) -> Self {
        ConvStackParams {
            layers: std::array::from_fn(|l| ConvLayer::zeros(shape.channels[l], shape.in_channels(l), shape.kernels[l])),
        }
    }

    pub fn he_normal(shape: &StackShape, rng: &mut SeededRng) -> Self {
        let mut layer = |l: usize| ConvLayer::he_normal(shape.channels[l], shape.in_channels(l), shape.kernels[l], rng);
        let first = layer(0);
        let second = layer(1);
        let third = layer(2);
        ConvStackParams {
            layers: [first, second, third],
        }
    }

    pub fn shape(&self) -> StackShape {
        StackShape {
            channels: std::array::from_fn(|l| self.layers[l].out_channels()),
            kernels: std::array::from_fn(|l| self.layers[l].kernel_size()),
        }
    }

    /// Checks layer chaining and the single-channel input and output.
    pub fn validate(&self) -> Result<()> {
        let shape = self.shape();
        shape.validate()?;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.in_channels() != shape.in_channels(l) || layer.bias.len() != layer.out_channels() {
                return Err(Error::dim("conv stack layer", layer.kernels.shape(), layer.bias.shape()));
            }
        }
        Ok(())
    }
}

impl<T: Scalar> TensorSet<T> for ConvStackParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.kernels, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.kernels, &mut l.bias]).collect()
    }
}

/// Runs the stack on a `1 x H x W` input.
pub fn conv_stack_forward<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvStackParams<T>,
) -> Result<(Tensor<T>, ConvStackCache<T>)> {
    if input.rank() != 3 || input.shape()[0] != 1 {
        return Err(Error::dim("conv stack input (expected 1 x H x W)", input.shape(), &[1, 0, 0]));
    }
    let [l1, l2, l3] = &params.layers;
    let pre1 = conv2d_forward(input, &l1.kernels, &l1.bias)?;
    let act1 = relu(&pre1);
    let pre2 = conv2d_forward(&act1, &l2.kernels, &l2.bias)?;
    let act2 = relu(&pre2);
    let out = conv2d_forward(&act2, &l3.kernels, &l3.bias)?;
    Ok((
        out,
        ConvStackCache {
            inputs: [input.clone(), act1, act2],
            pre_activations: [pre1, pre2],
        },
    ))
}

/// Parameter gradients (in [`TensorSet`] order) and the input gradient.
pub fn conv_stack_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &ConvStackCache<T>,
    params: &ConvStackParams<T>,
) -> Result<(ConvStackParams<T>, Tensor<T>)> {
    let [l1, l2, l3] = &params.layers;
    let g3 = conv2d_backward(grad_out, &cache.inputs[2], &l3.kernels)?;
    let d2 = relu_backward(&g3.grad_input, &cache.pre_activations[1])?;
    let g2 = conv2d_backward(&d2, &cache.inputs[1], &l2.kernels)?;
    let d1 = relu_backward(&g2.grad_input, &cache.pre_activations[0])?;
    let g1 = conv2d_backward(&d1, &cache.inputs[0], &l1.kernels)?;
    let layer = |weights: Tensor<T>, bias: Tensor<T>| ConvLayer { kernels: weights, bias };
    Ok((
        ConvStackParams {
            layers: [
                layer(g1.grad_weights, g1.grad_bias),
                layer(g2.grad_weights, g2.grad_bias),
                layer(g3.grad_weights, g3.grad_bias),
            ],
        },
        g1.grad_input,
    ))
}
