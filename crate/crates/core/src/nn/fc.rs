use crate::error::{Error, Result};
use crate::linalg::{gemm, Op};
use crate::nn::LayerGrads;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn fc_dims<T: Scalar>(weights: &Tensor<T>) -> Result<(usize, usize)> {
    match *weights.shape() {
        [rows, cols] => Ok((rows, cols)),
        _ => Err(Error::dim("fc weights (expected rank 2)", weights.shape(), &[0, 0])),
    }
}

/// Fully-connected layer `W x + b`.
///
/// `x` may have any shape; it is read in row-major order as a vector of
/// length `weights.cols`. The result has shape `[weights.rows]`.
pub fn fc_forward<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (rows, cols) = fc_dims(weights)?;
    if x.len() != cols {
        return Err(Error::dim("fc_forward input", x.shape(), weights.shape()));
    }
    let mut out = match bias {
        Some(b) => {
            if b.len() != rows {
                return Err(Error::dim("fc_forward bias", b.shape(), weights.shape()));
            }
            b.clone().reshape(&[rows])?
        }
        None => Tensor::zeros(&[rows]),
    };
    gemm(
        rows,
        1,
        cols,
        T::one(),
        weights.data(),
        Op::N,
        x.data(),
        Op::N,
        T::one(),
        out.data_mut(),
    );
    Ok(out)
}

/// Gradients of the fully-connected layer given the upstream gradient.
///
/// `grad_input` takes the shape of `cached_x`.
pub fn fc_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cached_x: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    let (rows, cols) = fc_dims(weights)?;
    if grad_out.len() != rows {
        return Err(Error::dim("fc_backward grad_out", grad_out.shape(), weights.shape()));
    }
    if cached_x.len() != cols {
        return Err(Error::dim("fc_backward input", cached_x.shape(), weights.shape()));
    }
    let mut grad_weights = Tensor::zeros(&[rows, cols]);
    gemm(
        rows,
        cols,
        1,
        T::one(),
        grad_out.data(),
        Op::N,
        cached_x.data(),
        Op::N,
        T::zero(),
        grad_weights.data_mut(),
    );
    let mut grad_input = Tensor::zeros(cached_x.shape());
    gemm(
        cols,
        1,
        rows,
        T::one(),
        weights.data(),
        Op::T,
        grad_out.data(),
        Op::N,
        T::zero(),
        grad_input.data_mut(),
    );
    Ok(LayerGrads {
        grad_weights,
        grad_bias: grad_out.clone().reshape(&[rows])?,
        grad_input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{finite_diff_grad, max_relative_error};
    use crate::rng::SeededRng;

    fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    #[test]
    fn identity_weights() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        assert_eq!(fc_forward(&x, &w, Some(&b)).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_weights_yield_bias() {
        let x = Tensor::<f64>::from_fn(&[5], |i| i as f64 - 2.0);
        let w = Tensor::zeros(&[3, 5]);
        let b = Tensor::filled(&[3], 3.0);
        assert_eq!(fc_forward(&x, &w, Some(&b)).unwrap().data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn random_matches_double_loop() {
        let mut rng = SeededRng::new(11);
        let (x, w, b) = (random(&[8], &mut rng), random(&[4, 8], &mut rng), random(&[4], &mut rng));
        let out = fc_forward(&x, &w, Some(&b)).unwrap();
        for i in 0..4 {
            let mut acc = b.data()[i];
            for j in 0..8 {
                acc += w.data()[i * 8 + j] * x.data()[j];
            }
            assert!((out.data()[i] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let x = Tensor::<f64>::zeros(&[3]);
        let w = Tensor::zeros(&[2, 4]);
        let msg = fc_forward(&x, &w, None).unwrap_err().to_string();
        assert!(msg.contains("[3]") && msg.contains("[2, 4]"), "{msg}");
        let g = Tensor::zeros(&[3]);
        assert!(fc_backward(&g, &Tensor::zeros(&[4]), &w).is_err());
    }

    #[test]
    fn backward_outer_product() {
        let g = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let x = Tensor::from_vec(&[2], vec![2.0, 3.0]).unwrap();
        let w = Tensor::from_vec(&[1, 2], vec![0.5, -1.0]).unwrap();
        let grads = fc_backward(&g, &x, &w).unwrap();
        assert_eq!(grads.grad_weights.data(), &[2.0, 3.0]);
        assert_eq!(grads.grad_bias.data(), &[1.0]);
        assert_eq!(grads.grad_input.data(), &[0.5, -1.0]);
    }

    #[test]
    fn identity_backward_passes_gradient() {
        let g = Tensor::from_vec(&[3], vec![0.5, -2.0, 7.0]).unwrap();
        let x = Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]).unwrap();
        let w = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(fc_backward(&g, &x, &w).unwrap().grad_input.data(), g.data());
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = SeededRng::new(100 + seed);
            let x = random(&[8], &mut rng);
            let w = random(&[4, 8], &mut rng);
            let b = random(&[4], &mut rng);
            let probe = random(&[4], &mut rng);
            let project = |t: Tensor<f64>| -> f64 {
                t.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum()
            };
            let grads = fc_backward(&probe, &x, &w).unwrap();

            let num_w = finite_diff_grad(|w| project(fc_forward(&x, w, Some(&b)).unwrap()), &w, 1e-5);
            let num_x = finite_diff_grad(|x| project(fc_forward(x, &w, Some(&b)).unwrap()), &x, 1e-5);
            let num_b = finite_diff_grad(|b| project(fc_forward(&x, &w, Some(b)).unwrap()), &b, 1e-5);
            assert!(max_relative_error(&grads.grad_weights, &num_w) < 1e-7);
            assert!(max_relative_error(&grads.grad_input, &num_x) < 1e-7);
            assert!(max_relative_error(&grads.grad_bias, &num_b) < 1e-7);
        }
    }
}
