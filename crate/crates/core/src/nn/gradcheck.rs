//! Central finite differences, the oracle for every hand-written backward pass.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Denominator floor for [`relative_error`]; entries whose analytic and
/// numeric values are both below it are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element `i` of `x`.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, h: T) -> Tensor<T>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> T,
{
    let mut probe = x.clone();
    let two_h = h + h;
    let grads = (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / two_h
        })
        .collect();
    Tensor::from_vec(x.shape(), grads).expect("same element count as x")
}

/// Central differences at selected entries, skipping non-smooth points.
///
/// `f` returns the loss together with a signature of its piecewise-linear
/// regime (for example the sign pattern of every ReLU input). An entry whose
/// perturbed evaluations land in a different regime than the unperturbed
/// point straddles a kink and yields `None`.
pub fn finite_diff_entries<T, S, F>(mut f: F, x: &Tensor<T>, h: T, indices: &[usize]) -> Vec<Option<T>>
where
    T: Scalar,
    S: PartialEq,
    F: FnMut(&Tensor<T>) -> (T, S),
{
    let (_, base) = f(x);
    let mut probe = x.clone();
    let two_h = h + h;
    indices
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let (up, sig_up) = f(&probe);
            probe.data_mut()[i] = orig - h;
            let (down, sig_down) = f(&probe);
            probe.data_mut()[i] = orig;
            (sig_up == base && sig_down == base).then(|| (up - down) / two_h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Largest element-wise [`relative_error`] between two equally sized tensors.
pub fn max_relative_error<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| relative_error(a.to_f64_lossy(), n.to_f64_lossy()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mse_loss;

    #[test]
    fn gradient_of_sum_is_ones() {
        let x = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 * 0.3 - 1.0);
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-5);
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn gradient_of_half_squared_norm_is_identity() {
        let x = Tensor::<f64>::from_fn(&[7], |i| (i as f64).sin());
        let g = finite_diff_grad(|t| 0.5 * t.data().iter().map(|v| v * v).sum::<f64>(), &x, 1e-5);
        for (a, b) in g.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn agrees_with_mse_gradient() {
        let target = Tensor::<f64>::from_fn(&[3, 4], |i| (i as f64 * 0.7).cos());
        let pred = Tensor::<f64>::from_fn(&[3, 4], |i| (i as f64 * 0.3).sin());
        let (_, analytic) = mse_loss(&pred, &target).unwrap();
        let numeric = finite_diff_grad(|p| mse_loss(p, &target).unwrap().0, &pred, 1e-5);
        assert!(max_relative_error(&analytic, &numeric) < 1e-8);
    }

    #[test]
    fn kinks_are_skipped() {
        let x = Tensor::<f64>::from_vec(&[3], vec![-1.0, 1e-7, 2.0]).unwrap();
        let f = |t: &Tensor<f64>| {
            let sig: Vec<bool> = t.data().iter().map(|&v| v > 0.0).collect();
            (t.data().iter().map(|v| v.max(0.0)).sum::<f64>(), sig)
        };
        let g = finite_diff_entries(f, &x, 1e-5, &[0, 1, 2]);
        assert_eq!(g[0], Some(0.0));
        assert!(g[1].is_none());
        assert!((g[2].unwrap() - 1.0).abs() < 1e-9);
    }
}
