use std::sync::Arc;

use crate::error::{Error, Result};
use crate::models::stack::{conv_stack_backward, conv_stack_forward, ConvStackCache, ConvStackParams, StackShape};
use crate::models::{check_revision, next_revision, output_loss, Architecture, FcLayer, Network, TensorSet};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::sensing::{sample_with, MeasurementMatrix, SensingConfig};
use crate::tensor::Tensor;

/// Learnable state of CSRNet plus the fixed measurement matrix it was
/// trained against (regenerated from `matrix_seed`, never stored).
#[derive(Clone, Debug)]
pub struct CsrNetParams<T: Scalar> {
    pub config: SensingConfig,
    pub matrix_seed: u64,
    /// `B^2 x m`, measurements to the preliminary block.
    pub initial_fc: FcLayer<T>,
    pub deep_stack: ConvStackParams<T>,
    pub residual_stack: ConvStackParams<T>,
    phi: Arc<Tensor<T>>,
    revision: u64,
}

#[derive(Clone, Debug)]
pub struct CsrNetGrads<T: Scalar> {
    pub initial_fc: FcLayer<T>,
    pub deep_stack: ConvStackParams<T>,
    pub residual_stack: ConvStackParams<T>,
}

#[derive(Clone, Debug)]
pub struct CsrNetCache<T: Scalar> {
    revision: u64,
    measurement: Tensor<T>,
    deep: ConvStackCache<T>,
    residual: ConvStackCache<T>,
}

impl<T: Scalar> CsrNetCache<T> {
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut p = self.deep.activation_pattern();
        p.extend(self.residual.activation_pattern());
        p
    }
}

impl<T: Scalar> CsrNetParams<T> {
    pub fn init(config: SensingConfig, stack: StackShape, param_seed: u64, matrix_seed: u64) -> Result<Self> {
        stack.validate()?;
        let mut rng = SeededRng::new(param_seed);
        let initial_fc = FcLayer::gaussian(config.pixels(), config.measurements, true, &mut rng);
        let deep_stack = ConvStackParams::he_normal(&stack, &mut rng);
        let residual_stack = ConvStackParams::he_normal(&stack, &mut rng);
        Self::from_parts(config, matrix_seed, initial_fc, deep_stack, residual_stack)
    }

    /// Assembles a network from explicit layers, regenerating the
    /// measurement matrix from `matrix_seed`.
    pub fn from_parts(
        config: SensingConfig,
        matrix_seed: u64,
        initial_fc: FcLayer<T>,
        deep_stack: ConvStackParams<T>,
        residual_stack: ConvStackParams<T>,
    ) -> Result<Self> {
        let matrix = MeasurementMatrix::gaussian(config.measurements, config.pixels(), matrix_seed)?;
        Self::with_matrix(config, &matrix, initial_fc, deep_stack, residual_stack)
    }

    /// Like [`CsrNetParams::from_parts`] with an already generated matrix.
    pub fn with_matrix(
        config: SensingConfig,
        matrix: &MeasurementMatrix,
        initial_fc: FcLayer<T>,
        deep_stack: ConvStackParams<T>,
        residual_stack: ConvStackParams<T>,
    ) -> Result<Self> {
        if matrix.rows() != config.measurements || matrix.cols() != config.pixels() {
            return Err(Error::dim(
                "csrnet measurement matrix",
                &[matrix.rows(), matrix.cols()],
                &[config.measurements, config.pixels()],
            ));
        }
        if initial_fc.in_dim() != config.measurements
            || initial_fc.out_dim() != config.pixels()
            || initial_fc.bias.as_ref().is_some_and(|b| b.len() != config.pixels())
        {
            return Err(Error::dim(
                "csrnet initial fc",
                initial_fc.weights.shape(),
                &[config.pixels(), config.measurements],
            ));
        }
        deep_stack.validate()?;
        residual_stack.validate()?;
        Ok(CsrNetParams {
            config,
            matrix_seed: matrix.seed(),
            initial_fc,
            deep_stack,
            residual_stack,
            phi: Arc::new(matrix.to_tensor()),
            revision: next_revision(),
        })
    }

    /// The fixed measurement operator in working precision.
    pub fn measurement_operator(&self) -> &Tensor<T> {
        &self.phi
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }
}

impl<T: Scalar> TensorSet<T> for CsrNetParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        self.initial_fc.push_tensors(&mut out);
        out.extend(self.deep_stack.tensors());
        out.extend(self.residual_stack.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.revision = next_revision();
        let mut out = Vec::new();
        self.initial_fc.push_tensors_mut(&mut out);
        out.extend(self.deep_stack.tensors_mut());
        out.extend(self.residual_stack.tensors_mut());
        out
    }
}

impl<T: Scalar> TensorSet<T> for CsrNetGrads<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        self.initial_fc.push_tensors(&mut out);
        out.extend(self.deep_stack.tensors());
        out.extend(self.residual_stack.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.initial_fc.push_tensors_mut(&mut out);
        out.extend(self.deep_stack.tensors_mut());
        out.extend(self.residual_stack.tensors_mut());
        out
    }
}

/// `x0 = reshape(initial_fc(y))`, `x1 = deep(x0)`, output `x1 + residual(x1)`.
pub fn csrnet_forward<T: Scalar>(y: &Tensor<T>, params: &CsrNetParams<T>) -> Result<(Tensor<T>, CsrNetCache<T>)> {
    let b = params.config.block_size;
    if y.len() != params.config.measurements {
        return Err(Error::dim("csrnet_forward measurements", y.shape(), &[params.config.measurements]));
    }
    let x0 = params.initial_fc.forward(y)?.reshape(&[1, b, b])?;
    let (x1, deep) = conv_stack_forward(&x0, &params.deep_stack)?;
    let (r, residual) = conv_stack_forward(&x1, &params.residual_stack)?;
    let mut out = x1;
    out.add_assign(&r)?;
    Ok((
        out.reshape(&[b, b])?,
        CsrNetCache {
            revision: params.revision,
            measurement: y.clone(),
            deep,
            residual,
        },
    ))
}

/// Chain rule through the skip connection, both stacks and the FC layer.
pub fn csrnet_backward<T: Scalar>(
    cache: &CsrNetCache<T>,
    grad_output: &Tensor<T>,
    params: &CsrNetParams<T>,
) -> Result<CsrNetGrads<T>> {
    check_revision(cache.revision, params.revision)?;
    let b = params.config.block_size;
    if grad_output.len() != b * b {
        return Err(Error::dim("csrnet_backward grad_output", grad_output.shape(), &[b, b]));
    }
    let g = grad_output.clone().reshape(&[1, b, b])?;
    let (residual_stack, through_residual) = conv_stack_backward(&g, &cache.residual, &params.residual_stack)?;
    let mut grad_x1 = g;
    grad_x1.add_assign(&through_residual)?;
    let (deep_stack, grad_x0) = conv_stack_backward(&grad_x1, &cache.deep, &params.deep_stack)?;
    let (initial_fc, _) = params.initial_fc.backward(&grad_x0, &cache.measurement)?;
    Ok(CsrNetGrads {
        initial_fc,
        deep_stack,
        residual_stack,
    })
}

impl<T: Scalar> Network<T> for CsrNetParams<T> {
    type Grads = CsrNetGrads<T>;

    fn architecture(&self) -> Architecture {
        Architecture::CsrNet
    }

    fn sensing(&self) -> SensingConfig {
        self.config
    }

    fn measure(&self, block: &Tensor<T>) -> Result<Tensor<T>> {
        sample_with(block, &self.phi)
    }

    fn reconstruct(&self, measurement: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(csrnet_forward(measurement, self)?.0)
    }

    fn training_input(&self, patch: &Tensor<T>) -> Result<Tensor<T>> {
        self.measure(patch)
    }

    fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.reconstruct(input)
    }

    fn loss_and_grads(&self, input: &Tensor<T>, target: &Tensor<T>) -> Result<(T, CsrNetGrads<T>)> {
        let (out, cache) = csrnet_forward(input, self)?;
        let (loss, grad) = output_loss(&out, target)?;
        Ok((loss, csrnet_backward(&cache, &grad, self)?))
    }

    fn zero_grads(&self) -> CsrNetGrads<T> {
        let stack = self.deep_stack.shape();
        CsrNetGrads {
            initial_fc: FcLayer::zeros(self.config.pixels(), self.config.measurements, self.initial_fc.bias.is_some()),
            deep_stack: ConvStackParams::zeros(&stack),
            residual_stack: ConvStackParams::zeros(&self.residual_stack.shape()),
        }
    }

    fn touch(&mut self) {
        self.revision = next_revision();
    }
}
