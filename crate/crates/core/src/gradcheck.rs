//! Finite-difference self-check of every backward pass.
//!
//! Each check compares analytic gradients with central differences in
//! `f64`. Layer checks use a random linear functional of the layer output
//! as the loss; network checks use the MSE training objective on the
//! [`StackShape::SMALL`] configuration. Entries whose perturbation flips a
//! ReLU are excluded and counted as skipped.

use crate::error::Result;
use crate::models::{
    asrnet_forward, csrnet_forward, output_loss, AsrNetParams, CsrNetParams, Network, StackShape, TensorSet,
};
use crate::nn::{
    conv2d_backward, conv2d_forward, fc_backward, fc_forward, finite_diff_entries, mse_loss, relative_error, relu,
    relu_backward,
};
use crate::rng::SeededRng;
use crate::sensing::SensingConfig;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Block size and measurement count of the network checks.
pub const SMALL_BLOCK: usize = 8;
pub const SMALL_MEASUREMENTS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_relative_error: f64,
    /// Entries compared.
    pub checked: usize,
    /// Entries excluded because a perturbation crossed a ReLU kink.
    pub skipped: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_relative_error < TOLERANCE
    }
}

/// Compares `analytic` against central differences of `f` at `indices`.
fn compare<S, F>(f: F, x: &Tensor<f64>, analytic: &Tensor<f64>, indices: &[usize], acc: &mut CheckResult)
where
    S: PartialEq,
    F: FnMut(&Tensor<f64>) -> (f64, S),
{
    for (&i, numeric) in indices.iter().zip(finite_diff_entries(f, x, STEP, indices)) {
        match numeric {
            Some(n) => {
                acc.checked += 1;
                acc.max_relative_error = acc.max_relative_error.max(relative_error(analytic.data()[i], n));
            }
            None => acc.skipped += 1,
        }
    }
}

fn result(name: &str) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
    }
}

fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_in(-1.0, 1.0))
}

fn all(x: &Tensor<f64>) -> Vec<usize> {
    (0..x.len()).collect()
}

/// Up to `limit` distinct indices of `x`, or all of them when `limit` is `None`.
fn pick(x: &Tensor<f64>, limit: Option<usize>, rng: &mut SeededRng) -> Vec<usize> {
    match limit {
        Some(k) if k < x.len() => {
            let mut idx = rng.permutation(x.len());
            idx.truncate(k);
            idx.sort_unstable();
            idx
        }
        _ => all(x),
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

pub fn check_fc(seed: u64) -> Result<CheckResult> {
    let mut rng = SeededRng::new(seed);
    let x = random(&[12], &mut rng);
    let w = random(&[5, 12], &mut rng);
    let b = random(&[5], &mut rng);
    let r = random(&[5], &mut rng);
    let g = fc_backward(&r, &x, &w)?;
    let mut acc = result("fc");
    let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| (dot(&fc_forward(x, w, Some(b)).unwrap(), &r), ());
    compare(|p| loss(p, &w, &b), &x, &g.grad_input, &all(&x), &mut acc);
    compare(|p| loss(&x, p, &b), &w, &g.grad_weights, &all(&w), &mut acc);
    compare(|p| loss(&x, &w, p), &b, &g.grad_bias, &all(&b), &mut acc);
    Ok(acc)
}

/// Conv layer `in_channels -> out_channels` with a `k x k` kernel on a
/// `size x size` input.
pub fn check_conv(in_channels: usize, out_channels: usize, k: usize, size: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = SeededRng::new(seed);
    let x = random(&[in_channels, size, size], &mut rng);
    let w = random(&[out_channels, in_channels, k, k], &mut rng);
    let b = random(&[out_channels], &mut rng);
    let r = random(&[out_channels, size, size], &mut rng);
    let g = conv2d_backward(&r, &x, &w)?;
    let mut acc = result(&format!("conv {k}x{k} ({in_channels}->{out_channels})"));
    let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| (dot(&conv2d_forward(x, w, b).unwrap(), &r), ());
    compare(|p| loss(p, &w, &b), &x, &g.grad_input, &all(&x), &mut acc);
    compare(|p| loss(&x, p, &b), &w, &g.grad_weights, &all(&w), &mut acc);
    compare(|p| loss(&x, &w, p), &b, &g.grad_bias, &all(&b), &mut acc);
    Ok(acc)
}

pub fn check_relu(seed: u64) -> Result<CheckResult> {
    let mut rng = SeededRng::new(seed);
    let mut x = random(&[40], &mut rng);
    // exact zeros and points within a step of the kink exercise the exclusion
    x.data_mut()[0] = 0.0;
    x.data_mut()[1] = 0.3 * STEP;
    let r = random(&[40], &mut rng);
    let analytic = relu_backward(&r, &x)?;
    let mut acc = result("relu");
    let signs = |p: &Tensor<f64>| p.data().iter().map(|&v| v > 0.0).collect::<Vec<_>>();
    compare(|p| (dot(&relu(p), &r), signs(p)), &x, &analytic, &all(&x), &mut acc);
    Ok(acc)
}

pub fn check_mse(seed: u64) -> Result<CheckResult> {
    let mut rng = SeededRng::new(seed);
    let pred = random(&[6, 7], &mut rng);
    let target = random(&[6, 7], &mut rng);
    let (_, analytic) = mse_loss(&pred, &target)?;
    let mut acc = result("mse");
    compare(|p| (mse_loss(p, &target).unwrap().0, ()), &pred, &analytic, &all(&pred), &mut acc);
    Ok(acc)
}

/// Perturbs each parameter tensor of `params` in turn; `eval` returns the
/// loss and the activation pattern.
fn check_network<N, F>(
    name: &str,
    params: &N,
    grads: &N::Grads,
    eval: F,
    limit: Option<usize>,
    rng: &mut SeededRng,
) -> CheckResult
where
    N: Network<f64>,
    F: Fn(&N) -> (f64, Vec<bool>),
{
    let mut acc = result(name);
    let originals: Vec<Tensor<f64>> = params.tensors().into_iter().cloned().collect();
    for (t, (x, analytic)) in originals.iter().zip(grads.tensors()).enumerate() {
        let indices = pick(x, limit, rng);
        let mut probe_params = params.clone();
        compare(
            |p| {
                *probe_params.tensors_mut()[t] = p.clone();
                eval(&probe_params)
            },
            x,
            analytic,
            &indices,
            &mut acc,
        );
    }
    acc
}

fn small_config() -> SensingConfig {
    SensingConfig::from_measurements(SMALL_BLOCK, SMALL_MEASUREMENTS).expect("valid small config")
}

/// Random block and target with values in `[0, 1]`.
fn block_pair(block: usize, rng: &mut SeededRng) -> (Tensor<f64>, Tensor<f64>) {
    let shape = [block, block];
    let block = Tensor::from_fn(&shape, |_| rng.uniform());
    let target = Tensor::from_fn(&shape, |_| rng.uniform());
    (block, target)
}

/// End-to-end CSRNet objective; `limit` caps the entries checked per tensor.
pub fn check_csrnet(seed: u64, limit: Option<usize>) -> Result<CheckResult> {
    check_csrnet_on(small_config(), StackShape::SMALL, seed, limit)
}

pub fn check_csrnet_on(
    config: SensingConfig,
    stack: StackShape,
    seed: u64,
    limit: Option<usize>,
) -> Result<CheckResult> {
    let mut rng = SeededRng::new(seed);
    let params = CsrNetParams::<f64>::init(config, stack, seed, seed + 1)?;
    let (block, target) = block_pair(config.block_size, &mut rng);
    let y = params.measure(&block)?;
    let (_, grads) = params.loss_and_grads(&y, &target)?;
    let eval = |p: &CsrNetParams<f64>| {
        let (out, cache) = csrnet_forward(&y, p).unwrap();
        (output_loss(&out, &target).unwrap().0, cache.activation_pattern())
    };
    Ok(check_network("csrnet end-to-end", &params, &grads, eval, limit, &mut rng))
}

/// End-to-end ASRNet objective including the learned sampling layer.
pub fn check_asrnet(seed: u64, limit: Option<usize>) -> Result<CheckResult> {
    check_asrnet_on(small_config(), StackShape::SMALL, seed, limit)
}

pub fn check_asrnet_on(
    config: SensingConfig,
    stack: StackShape,
    seed: u64,
    limit: Option<usize>,
) -> Result<CheckResult> {
    let mut rng = SeededRng::new(seed);
    let params = AsrNetParams::<f64>::init(config, stack, seed, true)?;
    let (block, _) = block_pair(config.block_size, &mut rng);
    let (_, grads) = params.loss_and_grads(&block, &block)?;
    let eval = |p: &AsrNetParams<f64>| {
        let (out, _, cache) = asrnet_forward(&block, p).unwrap();
        (output_loss(&out, &block).unwrap().0, cache.activation_pattern())
    };
    Ok(check_network("asrnet end-to-end", &params, &grads, eval, limit, &mut rng))
}

/// Every check. `full` compares every parameter of the network checks;
/// otherwise 24 random entries per tensor.
pub fn run_suite(full: bool, seed: u64) -> Result<Vec<CheckResult>> {
    let limit = (!full).then_some(24);
    Ok(vec![
        check_fc(seed)?,
        check_conv(1, 6, 11, 12, seed)?,
        check_conv(5, 4, 1, 6, seed)?,
        check_conv(3, 1, 7, 9, seed)?,
        check_relu(seed)?,
        check_mse(seed)?,
        check_csrnet(seed, limit)?,
        check_asrnet(seed, limit)?,
    ])
}
