use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean squared error over all elements and its gradient `2 (pred - target) / N`.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::dim("mse_loss", pred.shape(), target.shape()));
    }
    let n = T::of(pred.len() as f64);
    let scale = T::of(2.0) / n;
    let mut sum = T::zero();
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            sum += d * d;
            scale * d
        })
        .collect();
    Ok((sum / n, Tensor::from_vec(pred.shape(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs() {
        let a = Tensor::<f64>::from_fn(&[2, 2], |i| i as f64);
        let (loss, grad) = mse_loss(&a, &a).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_element() {
        let p = Tensor::<f64>::zeros(&[1]);
        let t = Tensor::filled(&[1], 1.0);
        let (loss, grad) = mse_loss(&p, &t).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(grad.data(), &[-2.0]);
    }

    #[test]
    fn shape_mismatch() {
        let p = Tensor::<f32>::zeros(&[4]);
        let t = Tensor::zeros(&[2, 2]);
        assert!(matches!(mse_loss(&p, &t), Err(Error::Dimension { .. })));
    }
}
