use crate::error::{Error, Result};
use crate::models::stack::{conv_stack_backward, conv_stack_forward, ConvStackCache, ConvStackParams, StackShape};
use crate::models::{check_revision, next_revision, output_loss, Architecture, FcLayer, Network, TensorSet};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::sensing::SensingConfig;
use crate::tensor::Tensor;

/// Learnable state of ASRNet: learned sampling, learned initial
/// reconstruction and a residual stack.
#[derive(Clone, Debug)]
pub struct AsrNetParams<T: Scalar> {
    pub config: SensingConfig,
    /// `m x B^2`, the learned measurement operator. Bias-free by default.
    pub sampling_fc: FcLayer<T>,
    /// `B^2 x m`, the learned initial reconstruction operator.
    pub initial_fc: FcLayer<T>,
    pub residual_stack: ConvStackParams<T>,
    revision: u64,
}

#[derive(Clone, Debug)]
pub struct AsrNetGrads<T: Scalar> {
    pub sampling_fc: FcLayer<T>,
    pub initial_fc: FcLayer<T>,
    pub residual_stack: ConvStackParams<T>,
    /// Gradient with respect to the input block (not a parameter).
    pub input: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct AsrNetCache<T: Scalar> {
    revision: u64,
    block: Tensor<T>,
    measurement: Tensor<T>,
    residual: ConvStackCache<T>,
}

impl<T: Scalar> AsrNetCache<T> {
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.residual.activation_pattern()
    }
}

impl<T: Scalar> AsrNetParams<T> {
    pub fn init(config: SensingConfig, stack: StackShape, seed: u64, sampling_bias: bool) -> Result<Self> {
        stack.validate()?;
        let mut rng = SeededRng::new(seed);
        let sampling_fc = FcLayer::gaussian(config.measurements, config.pixels(), sampling_bias, &mut rng);
        let initial_fc = FcLayer::gaussian(config.pixels(), config.measurements, true, &mut rng);
        let residual_stack = ConvStackParams::he_normal(&stack, &mut rng);
        Self::from_parts(config, sampling_fc, initial_fc, residual_stack)
    }

    pub fn from_parts(
        config: SensingConfig,
        sampling_fc: FcLayer<T>,
        initial_fc: FcLayer<T>,
        residual_stack: ConvStackParams<T>,
    ) -> Result<Self> {
        let (m, n) = (config.measurements, config.pixels());
        if sampling_fc.out_dim() != m || sampling_fc.in_dim() != n {
            return Err(Error::dim("asrnet sampling fc", sampling_fc.weights.shape(), &[m, n]));
        }
        if initial_fc.out_dim() != n || initial_fc.in_dim() != m {
            return Err(Error::dim("asrnet initial fc", initial_fc.weights.shape(), &[n, m]));
        }
        residual_stack.validate()?;
        Ok(AsrNetParams {
            config,
            sampling_fc,
            initial_fc,
            residual_stack,
            revision: next_revision(),
        })
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    fn reconstruct_from(&self, y: &Tensor<T>) -> Result<(Tensor<T>, ConvStackCache<T>)> {
        let b = self.config.block_size;
        let x0 = self.initial_fc.forward(y)?.reshape(&[1, b, b])?;
        let (r, cache) = conv_stack_forward(&x0, &self.residual_stack)?;
        let mut out = x0;
        out.add_assign(&r)?;
        Ok((out.reshape(&[b, b])?, cache))
    }
}

impl<T: Scalar> TensorSet<T> for AsrNetParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        self.sampling_fc.push_tensors(&mut out);
        self.initial_fc.push_tensors(&mut out);
        out.extend(self.residual_stack.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.revision = next_revision();
        let mut out = Vec::new();
        self.sampling_fc.push_tensors_mut(&mut out);
        self.initial_fc.push_tensors_mut(&mut out);
        out.extend(self.residual_stack.tensors_mut());
        out
    }
}

impl<T: Scalar> TensorSet<T> for AsrNetGrads<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        self.sampling_fc.push_tensors(&mut out);
        self.initial_fc.push_tensors(&mut out);
        out.extend(self.residual_stack.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.sampling_fc.push_tensors_mut(&mut out);
        self.initial_fc.push_tensors_mut(&mut out);
        out.extend(self.residual_stack.tensors_mut());
        out
    }
}

/// `y = sampling_fc(vec(block))`, `x0 = reshape(initial_fc(y))`, output
/// `x0 + residual(x0)`. Returns the measurement alongside the output.
pub fn asrnet_forward<T: Scalar>(
    block: &Tensor<T>,
    params: &AsrNetParams<T>,
) -> Result<(Tensor<T>, Tensor<T>, AsrNetCache<T>)> {
    let b = params.config.block_size;
    if block.len() != b * b {
        return Err(Error::dim("asrnet_forward block", block.shape(), &[b, b]));
    }
    let y = params.sampling_fc.forward(block)?;
    let (out, residual) = params.reconstruct_from(&y)?;
    let cache = AsrNetCache {
        revision: params.revision,
        block: block.clone(),
        measurement: y.clone(),
        residual,
    };
    Ok((out, y, cache))
}

/// Chain rule through the skip connection, the residual stack, the initial
/// FC and the sampling FC, down to the input block.
pub fn asrnet_backward<T: Scalar>(
    cache: &AsrNetCache<T>,
    grad_output: &Tensor<T>,
    params: &AsrNetParams<T>,
) -> Result<AsrNetGrads<T>> {
    check_revision(cache.revision, params.revision)?;
    let b = params.config.block_size;
    if grad_output.len() != b * b {
        return Err(Error::dim("asrnet_backward grad_output", grad_output.shape(), &[b, b]));
    }
    let g = grad_output.clone().reshape(&[1, b, b])?;
    let (residual_stack, through_residual) = conv_stack_backward(&g, &cache.residual, &params.residual_stack)?;
    let mut grad_x0 = g;
    grad_x0.add_assign(&through_residual)?;
    let (initial_fc, grad_y) = params.initial_fc.backward(&grad_x0, &cache.measurement)?;
    let (sampling_fc, input) = params.sampling_fc.backward(&grad_y, &cache.block)?;
    Ok(AsrNetGrads {
        sampling_fc,
        initial_fc,
        residual_stack,
        input,
    })
}

impl<T: Scalar> Network<T> for AsrNetParams<T> {
    type Grads = AsrNetGrads<T>;

    fn architecture(&self) -> Architecture {
        Architecture::AsrNet
    }

    fn sensing(&self) -> SensingConfig {
        self.config
    }

    fn measure(&self, block: &Tensor<T>) -> Result<Tensor<T>> {
        self.sampling_fc.forward(block)
    }

    fn reconstruct(&self, measurement: &Tensor<T>) -> Result<Tensor<T>> {
        if measurement.len() != self.config.measurements {
            return Err(Error::dim(
                "asrnet reconstruct measurements",
                measurement.shape(),
                &[self.config.measurements],
            ));
        }
        Ok(self.reconstruct_from(measurement)?.0)
    }

    fn training_input(&self, patch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(patch.clone())
    }

    fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(asrnet_forward(input, self)?.0)
    }

    fn loss_and_grads(&self, input: &Tensor<T>, target: &Tensor<T>) -> Result<(T, AsrNetGrads<T>)> {
        let (out, _, cache) = asrnet_forward(input, self)?;
        let (loss, grad) = output_loss(&out, target)?;
        Ok((loss, asrnet_backward(&cache, &grad, self)?))
    }

    fn zero_grads(&self) -> AsrNetGrads<T> {
        let (m, n) = (self.config.measurements, self.config.pixels());
        let b = self.config.block_size;
        AsrNetGrads {
            sampling_fc: FcLayer::zeros(m, n, self.sampling_fc.bias.is_some()),
            initial_fc: FcLayer::zeros(n, m, self.initial_fc.bias.is_some()),
            residual_stack: ConvStackParams::zeros(&self.residual_stack.shape()),
            input: Tensor::zeros(&[b, b]),
        }
    }

    fn touch(&mut self) {
        self.revision = next_revision();
    }
}
