//! The two cascaded reconstruction networks.
//!
//! * [`CsrNetParams`]: fixed random orthonormal sampling, then a learned
//!   FC initial reconstruction, a deep conv stack and a residual conv stack.
//! * [`AsrNetParams`]: a learned FC sampling layer, a learned FC initial
//!   reconstruction and a residual conv stack, trained end to end.

mod asrnet;
mod csrnet;
mod io;
mod stack;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

pub use asrnet::{asrnet_backward, asrnet_forward, AsrNetCache, AsrNetGrads, AsrNetParams};
pub use csrnet::{csrnet_backward, csrnet_forward, CsrNetCache, CsrNetGrads, CsrNetParams};
pub use io::{load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use stack::{conv_stack_backward, conv_stack_forward, ConvLayer, ConvStackCache, ConvStackParams, StackShape};

use crate::error::{Error, Result};
use crate::nn::{fc_backward, fc_forward, mse_loss};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::sensing::SensingConfig;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    CsrNet,
    AsrNet,
}

impl Architecture {
    pub fn tag(self) -> u8 {
        match self {
            Architecture::CsrNet => 1,
            Architecture::AsrNet => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Architecture::CsrNet),
            2 => Some(Architecture::AsrNet),
            _ => None,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::CsrNet => "csrnet",
            Architecture::AsrNet => "asrnet",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csrnet" => Ok(Architecture::CsrNet),
            "asrnet" => Ok(Architecture::AsrNet),
            other => Err(Error::config(format!("unknown architecture {other:?} (csrnet | asrnet)"))),
        }
    }
}

/// Ordered view over every tensor of a parameter or gradient container.
///
/// Parameters and their gradients enumerate tensors in the same order, so
/// optimizers and reductions can zip the two lists.
pub trait TensorSet<T: Scalar> {
    fn tensors(&self) -> Vec<&Tensor<T>>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Element-wise `self += other`; both sets must share a layout.
    fn accumulate(&mut self, other: &Self) -> Result<()>
    where
        Self: Sized,
    {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.add_assign(src)?;
        }
        Ok(())
    }

    fn scale_all(&mut self, factor: T) {
        for t in self.tensors_mut() {
            t.scale(factor);
        }
    }

    fn is_all_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.data().iter().all(|v| v.is_zero()))
    }
}

static NEXT_REVISION: AtomicU64 = AtomicU64::new(1);

/// Identity of one parameter state; forward caches record it so a backward
/// pass against modified parameters is refused.
pub(crate) fn next_revision() -> u64 {
    NEXT_REVISION.fetch_add(1, Ordering::Relaxed)
}

pub(crate) fn check_revision(cached: u64, current: u64) -> Result<()> {
    if cached != current {
        return Err(Error::StaleCache { cached, current });
    }
    Ok(())
}

/// Fully-connected layer parameters; `weights` is `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct FcLayer<T> {
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> FcLayer<T> {
    pub fn zeros(out_dim: usize, in_dim: usize, with_bias: bool) -> Self {
        FcLayer {
            weights: Tensor::zeros(&[out_dim, in_dim]),
            bias: with_bias.then(|| Tensor::zeros(&[out_dim])),
        }
    }

    /// Gaussian weights with std `sqrt(1 / in_dim)`, zero bias.
    pub fn gaussian(out_dim: usize, in_dim: usize, with_bias: bool, rng: &mut SeededRng) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        FcLayer {
            weights: Tensor::from_fn(&[out_dim, in_dim], |_| T::of(std * rng.normal())),
            bias: with_bias.then(|| Tensor::zeros(&[out_dim])),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        fc_forward(x, &self.weights, self.bias.as_ref())
    }

    /// Gradients shaped like `self` plus the input gradient.
    pub fn backward(&self, grad_out: &Tensor<T>, cached_x: &Tensor<T>) -> Result<(FcLayer<T>, Tensor<T>)> {
        let g = fc_backward(grad_out, cached_x, &self.weights)?;
        Ok((
            FcLayer {
                weights: g.grad_weights,
                bias: self.bias.is_some().then_some(g.grad_bias),
            },
            g.grad_input,
        ))
    }

    fn push_tensors<'a>(&'a self, out: &mut Vec<&'a Tensor<T>>) {
        out.push(&self.weights);
        out.extend(self.bias.as_ref());
    }

    fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.weights);
        out.extend(self.bias.as_mut());
    }
}

/// Common interface the trainer and evaluator drive both networks through.
pub trait Network<T: Scalar>: TensorSet<T> + Clone + Send + Sync {
    type Grads: TensorSet<T> + Send;

    fn architecture(&self) -> Architecture;

    fn sensing(&self) -> SensingConfig;

    /// Acquisition: the measurement vector of a `B x B` block.
    fn measure(&self, block: &Tensor<T>) -> Result<Tensor<T>>;

    /// Reconstruction of a `B x B` block from its measurements.
    fn reconstruct(&self, measurement: &Tensor<T>) -> Result<Tensor<T>>;

    /// What the network consumes during training for a given patch: the
    /// fixed measurement for CSRNet, the patch itself for ASRNet.
    fn training_input(&self, patch: &Tensor<T>) -> Result<Tensor<T>>;

    /// Output for a training input, without retaining a cache.
    fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>>;

    /// MSE against `target` and the gradient of every parameter.
    fn loss_and_grads(&self, input: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Self::Grads)>;

    fn zero_grads(&self) -> Self::Grads;

    /// Marks the parameters as changed, invalidating outstanding caches.
    fn touch(&mut self);
}

/// Multiply-accumulates needed to reconstruct one block.
///
/// Every FC layer costs `m B^2` and every conv layer `O C k^2 B^2`. CSRNet
/// reconstruction is one FC plus two stacks; ASRNet reconstruction is one FC
/// plus one stack. ASRNet's sampling FC is acquisition and is not counted.
pub fn flop_count(arch: Architecture, config: &SensingConfig, stack: &StackShape) -> u64 {
    let fc = (config.measurements * config.pixels()) as u64;
    let conv = stack.macs(config.block_size);
    match arch {
        Architecture::CsrNet => fc + 2 * conv,
        Architecture::AsrNet => fc + conv,
    }
}

/// Either network, as stored in a model file.
#[derive(Clone, Debug)]
pub enum Model<T: Scalar> {
    CsrNet(CsrNetParams<T>),
    AsrNet(AsrNetParams<T>),
}

impl<T: Scalar> Model<T> {
    /// He-normal conv kernels, `sqrt(1 / fan_in)` Gaussian FC weights, zero
    /// biases. CSRNet draws its measurement matrix from the same seed.
    pub fn init(arch: Architecture, config: SensingConfig, stack: StackShape, seed: u64) -> Result<Self> {
        Ok(match arch {
            Architecture::CsrNet => Model::CsrNet(CsrNetParams::init(config, stack, seed, seed)?),
            Architecture::AsrNet => Model::AsrNet(AsrNetParams::init(config, stack, seed, false)?),
        })
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            Model::CsrNet(_) => Architecture::CsrNet,
            Model::AsrNet(_) => Architecture::AsrNet,
        }
    }

    pub fn sensing(&self) -> SensingConfig {
        match self {
            Model::CsrNet(p) => p.sensing(),
            Model::AsrNet(p) => p.sensing(),
        }
    }

    pub fn stack_shape(&self) -> StackShape {
        match self {
            Model::CsrNet(p) => p.deep_stack.shape(),
            Model::AsrNet(p) => p.residual_stack.shape(),
        }
    }

    pub fn measure(&self, block: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Model::CsrNet(p) => p.measure(block),
            Model::AsrNet(p) => p.measure(block),
        }
    }

    pub fn reconstruct(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Model::CsrNet(p) => p.reconstruct(y),
            Model::AsrNet(p) => p.reconstruct(y),
        }
    }

    pub fn flop_count(&self) -> u64 {
        flop_count(self.architecture(), &self.sensing(), &self.stack_shape())
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        match self {
            Model::CsrNet(p) => p.tensors(),
            Model::AsrNet(p) => p.tensors(),
        }
    }
}

impl<T: Scalar> From<CsrNetParams<T>> for Model<T> {
    fn from(p: CsrNetParams<T>) -> Self {
        Model::CsrNet(p)
    }
}

impl<T: Scalar> From<AsrNetParams<T>> for Model<T> {
    fn from(p: AsrNetParams<T>) -> Self {
        Model::AsrNet(p)
    }
}

/// Loss and its gradient with respect to the `B x B` output.
pub(crate) fn output_loss<T: Scalar>(output: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if output.len() != target.len() {
        return Err(Error::dim("reconstruction target", target.shape(), output.shape()));
    }
    let target = target.clone().reshape(output.shape())?;
    mse_loss(output, &target)
}
