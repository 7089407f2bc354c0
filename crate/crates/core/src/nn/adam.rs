use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// A zero learning rate is accepted and leaves parameters untouched.
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::config(format!(
                "Adam needs lr >= 0, 0 <= beta1, beta2 < 1 and eps > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-parameter moment estimates.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub first_moment: Tensor<T>,
    pub second_moment: Tensor<T>,
    pub step_count: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(param_shape: &[usize]) -> Self {
        AdamState {
            first_moment: Tensor::zeros(param_shape),
            second_moment: Tensor::zeros(param_shape),
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
///
/// A gradient holding NaN or infinity is rejected before anything is modified.
pub fn adam_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    config: &AdamConfig,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::dim("adam_step grad", grad.shape(), param.shape()));
    }
    if state.first_moment.shape() != param.shape() || state.second_moment.shape() != param.shape() {
        return Err(Error::dim("adam_step state", state.first_moment.shape(), param.shape()));
    }
    grad.ensure_finite("adam_step gradient")?;

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (T::of(config.beta1), T::of(config.beta2));
    let correction1 = T::one() - T::of(config.beta1.powi(t));
    let correction2 = T::one() - T::of(config.beta2.powi(t));
    let (lr, eps) = (T::of(config.lr), T::of(config.eps));

    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = Tensor::<f64>::from_fn(&[3], |i| i as f64);
        let before = p.clone();
        let mut s = AdamState::new(&[3]);
        adam_step(&mut p, &Tensor::zeros(&[3]), &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn first_step_hand_evaluated() {
        let mut p = Tensor::<f64>::filled(&[1], 1.0);
        let g = Tensor::filled(&[1], 1.0);
        let mut s = AdamState::new(&[1]);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &g, &mut s, &cfg).unwrap();
        // m_hat = v_hat = 1 after bias correction.
        let expect = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.data()[0] - expect).abs() < 1e-15);
        assert!((p.data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn step_count_increments() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        let g = Tensor::filled(&[2], 0.5);
        let mut s = AdamState::new(&[2]);
        for k in 1..=4 {
            adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
            assert_eq!(s.step_count, k);
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        let g = Tensor::from_vec(&[2], vec![1.0, f32::INFINITY]).unwrap();
        let mut s = AdamState::new(&[2]);
        let err = adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(s.step_count, 0);
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_trajectory() {
        let run = || {
            let mut p = Tensor::<f32>::from_fn(&[5], |i| i as f32 * 0.1);
            let mut s = AdamState::new(&[5]);
            for k in 0..20 {
                let g = Tensor::from_fn(&[5], |i| ((i + k) as f32 * 0.7).sin());
                adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
            }
            p.into_data().into_iter().map(f32::to_bits).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
