//! Stride-1, same-size 2-D convolution (cross-correlation).
//!
//! The input is zero-padded by `(k - 1) / 2` on every side, so odd kernels
//! keep the spatial size. Layers with many output maps expand the padded
//! input into a `(C k k) x (H W)` patch matrix and multiply it by the
//! `O x (C k k)` kernel matrix. Layers with few output maps and a spatial
//! kernel accumulate one shifted plane per kernel tap instead.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::linalg::{gemm, Op};
use crate::nn::LayerGrads;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    in_channels: usize,
    out_channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(input_shape: &[usize], kernels: &Tensor<T>) -> Result<Self> {
        let &[o, c, kh, kw] = kernels.shape() else {
            return Err(Error::dim("conv2d kernels (expected rank 4)", kernels.shape(), &[0, 0, 0, 0]));
        };
        if kh != kw || kh % 2 == 0 {
            return Err(Error::config(format!(
                "conv2d kernels must be square with odd size, got {kh}x{kw}"
            )));
        }
        let &[ci, h, w] = input_shape else {
            return Err(Error::dim("conv2d input (expected rank 3)", input_shape, kernels.shape()));
        };
        if ci != c {
            return Err(Error::dim("conv2d channels", input_shape, kernels.shape()));
        }
        Ok(ConvGeom {
            in_channels: c,
            out_channels: o,
            height: h,
            width: w,
            kernel: kh,
        })
    }

    fn patch_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Range of output columns `j` for which `j + offset` lies in `0..width`.
fn valid_span(offset: isize, width: usize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (width as isize - offset).clamp(0, width as isize) as usize;
    (lo.min(hi), hi)
}

/// Expands a `C x H x W` buffer into the `(C k k) x (H W)` patch matrix of
/// its zero-padded version.
pub fn im2col<T: Scalar>(input: &[T], channels: usize, height: usize, width: usize, k: usize) -> Vec<T> {
    assert_eq!(input.len(), channels * height * width);
    let pad = (k / 2) as isize;
    let hw = height * width;
    let mut cols = vec![T::zero(); channels * k * k * hw];
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for u in 0..k {
            for v in 0..k {
                let row = (c * k + u) * k + v;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = v as isize - pad;
                let (j0, j1) = valid_span(dx, width);
                for i in 0..height {
                    let src_i = i as isize + u as isize - pad;
                    if src_i < 0 || src_i >= height as isize || j0 >= j1 {
                        continue;
                    }
                    let src = &plane[src_i as usize * width..(src_i as usize + 1) * width];
                    let from = (j0 as isize + dx) as usize;
                    dst[i * width + j0..i * width + j1].copy_from_slice(&src[from..from + (j1 - j0)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-matrix entries back onto the
/// unpadded `C x H x W` grid, summing overlaps and dropping padding.
pub fn col2im<T: Scalar>(cols: &[T], channels: usize, height: usize, width: usize, k: usize) -> Vec<T> {
    let hw = height * width;
    assert_eq!(cols.len(), channels * k * k * hw);
    let pad = (k / 2) as isize;
    let mut out = vec![T::zero(); channels * hw];
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for u in 0..k {
            for v in 0..k {
                let row = (c * k + u) * k + v;
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = v as isize - pad;
                let (j0, j1) = valid_span(dx, width);
                for i in 0..height {
                    let dst_i = i as isize + u as isize - pad;
                    if dst_i < 0 || dst_i >= height as isize || j0 >= j1 {
                        continue;
                    }
                    let to = dst_i as usize * width + (j0 as isize + dx) as usize;
                    for (d, &s) in plane[to..to + (j1 - j0)]
                        .iter_mut()
                        .zip(&src[i * width + j0..i * width + j1])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

/// Layers with few output maps starve the matrix multiply (a single-row
/// product against a huge patch matrix); those are evaluated by shifting
/// and accumulating input rows instead.
const DIRECT_MAX_OUT_CHANNELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Strategy {
    Patches,
    Direct,
}

impl Strategy {
    fn for_geom(g: &ConvGeom) -> Self {
        if g.out_channels <= DIRECT_MAX_OUT_CHANNELS && g.kernel > 1 {
            Strategy::Direct
        } else {
            Strategy::Patches
        }
    }
}

/// Zero-padded copy of a `C x H x W` buffer with row stride `W + 2p`,
/// followed by `2p` slack zeros so every tap can read `H (W + 2p)`
/// contiguous values.
struct PaddedPlanes<T> {
    data: Vec<T>,
    stride: usize,
    plane: usize,
}

impl<T: Scalar> PaddedPlanes<T> {
    fn zeros(g: &ConvGeom) -> Self {
        let pad = g.kernel / 2;
        let stride = g.width + 2 * pad;
        let plane = (g.height + 2 * pad) * stride + 2 * pad;
        PaddedPlanes {
            data: vec![T::zero(); g.in_channels * plane],
            stride,
            plane,
        }
    }

    fn from_input(input: &[T], g: &ConvGeom) -> Self {
        let mut p = Self::zeros(g);
        let pad = g.kernel / 2;
        for c in 0..g.in_channels {
            for i in 0..g.height {
                let src = &input[(c * g.height + i) * g.width..][..g.width];
                let at = c * p.plane + (i + pad) * p.stride + pad;
                p.data[at..at + g.width].copy_from_slice(src);
            }
        }
        p
    }

    /// `H x (W + 2p)` window whose top-left corner is padded pixel `(u, v)`.
    fn window(&self, c: usize, u: usize, v: usize, height: usize) -> std::ops::Range<usize> {
        let at = c * self.plane + u * self.stride + v;
        at..at + height * self.stride
    }
}

/// Re-lays out `O x H x W` rows with the padded stride, zero filling the gap.
fn widen<T: Scalar>(rows: &[T], channels: usize, g: &ConvGeom, stride: usize) -> Vec<T> {
    let mut out = vec![T::zero(); channels * g.height * stride];
    for (dst, src) in out.chunks_exact_mut(stride).zip(rows.chunks_exact(g.width)) {
        dst[..g.width].copy_from_slice(src);
    }
    out
}

fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (d, &s) in y.iter_mut().zip(x) {
        *d += alpha * s;
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (xa, xb) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

fn kernel_index(g: &ConvGeom, o: usize, c: usize, u: usize, v: usize) -> usize {
    ((o * g.in_channels + c) * g.kernel + u) * g.kernel + v
}

fn direct_accumulate<T: Scalar>(input: &[T], kernels: &[T], out: &mut [T], g: &ConvGeom) {
    let padded = PaddedPlanes::from_input(input, g);
    let stride = padded.stride;
    let mut wide = widen(out, g.out_channels, g, stride);
    let span = g.height * stride;
    for o in 0..g.out_channels {
        let dst = &mut wide[o * span..(o + 1) * span];
        for c in 0..g.in_channels {
            for u in 0..g.kernel {
                for v in 0..g.kernel {
                    let w = kernels[kernel_index(g, o, c, u, v)];
                    axpy(w, &padded.data[padded.window(c, u, v, g.height)], dst);
                }
            }
        }
    }
    for (dst, src) in out.chunks_exact_mut(g.width).zip(wide.chunks_exact(stride)) {
        dst.copy_from_slice(&src[..g.width]);
    }
}

fn direct_kernel_grads<T: Scalar>(grad_out: &[T], input: &[T], grad_kernels: &mut [T], g: &ConvGeom) {
    let padded = PaddedPlanes::from_input(input, g);
    let stride = padded.stride;
    let wide = widen(grad_out, g.out_channels, g, stride);
    let span = g.height * stride;
    for o in 0..g.out_channels {
        let upstream = &wide[o * span..(o + 1) * span];
        for c in 0..g.in_channels {
            for u in 0..g.kernel {
                for v in 0..g.kernel {
                    grad_kernels[kernel_index(g, o, c, u, v)] =
                        dot(upstream, &padded.data[padded.window(c, u, v, g.height)]);
                }
            }
        }
    }
}

fn direct_input_grads<T: Scalar>(grad_out: &[T], kernels: &[T], grad_input: &mut [T], g: &ConvGeom) {
    let mut padded = PaddedPlanes::zeros(g);
    let stride = padded.stride;
    let wide = widen(grad_out, g.out_channels, g, stride);
    let span = g.height * stride;
    for o in 0..g.out_channels {
        let upstream = &wide[o * span..(o + 1) * span];
        for c in 0..g.in_channels {
            for u in 0..g.kernel {
                for v in 0..g.kernel {
                    let w = kernels[kernel_index(g, o, c, u, v)];
                    let range = padded.window(c, u, v, g.height);
                    axpy(w, upstream, &mut padded.data[range]);
                }
            }
        }
    }
    let pad = g.kernel / 2;
    for c in 0..g.in_channels {
        for i in 0..g.height {
            let at = c * padded.plane + (i + pad) * stride + pad;
            grad_input[(c * g.height + i) * g.width..][..g.width].copy_from_slice(&padded.data[at..at + g.width]);
        }
    }
}

fn patches<'a, T: Scalar>(input: &'a Tensor<T>, g: &ConvGeom) -> Cow<'a, [T]> {
    if g.kernel == 1 {
        Cow::Borrowed(input.data())
    } else {
        Cow::Owned(im2col(input.data(), g.in_channels, g.height, g.width, g.kernel))
    }
}

/// `out[o][i][j] = bias[o] + sum_{c,u,v} kernels[o][c][u][v] * padded[c][i+u][j+v]`.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), kernels)?;
    if bias.len() != g.out_channels {
        return Err(Error::dim("conv2d bias", bias.shape(), kernels.shape()));
    }
    let hw = g.pixels();
    let mut out = Tensor::zeros(&[g.out_channels, g.height, g.width]);
    for (row, &b) in out.data_mut().chunks_exact_mut(hw).zip(bias.data()) {
        row.fill(b);
    }
    match Strategy::for_geom(&g) {
        Strategy::Direct => direct_accumulate(input.data(), kernels.data(), out.data_mut(), &g),
        Strategy::Patches => {
            let cols = patches(input, &g);
            gemm(
                g.out_channels,
                hw,
                g.patch_rows(),
                T::one(),
                kernels.data(),
                Op::N,
                &cols,
                Op::N,
                T::one(),
                out.data_mut(),
            );
        }
    }
    Ok(out)
}

/// Kernel, bias and input gradients of [`conv2d_forward`].
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cached_input: &Tensor<T>,
    kernels: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    let g = ConvGeom::new(cached_input.shape(), kernels)?;
    grad_out.ensure_shape("conv2d_backward grad_out", &[g.out_channels, g.height, g.width])?;
    let hw = g.pixels();
    let rows = g.patch_rows();

    let bias_grads = grad_out.data().chunks_exact(hw).map(|r| r.iter().copied().sum()).collect();
    let grad_bias = Tensor::from_vec(&[g.out_channels], bias_grads)?;
    let mut grad_weights = Tensor::zeros(kernels.shape());

    let grad_input = match Strategy::for_geom(&g) {
        Strategy::Direct => {
            direct_kernel_grads(grad_out.data(), cached_input.data(), grad_weights.data_mut(), &g);
            let mut grad_input = vec![T::zero(); g.in_channels * hw];
            direct_input_grads(grad_out.data(), kernels.data(), &mut grad_input, &g);
            grad_input
        }
        Strategy::Patches => {
            let cols = patches(cached_input, &g);
            gemm(
                g.out_channels,
                rows,
                hw,
                T::one(),
                grad_out.data(),
                Op::N,
                &cols,
                Op::T,
                T::zero(),
                grad_weights.data_mut(),
            );
            drop(cols);

            let mut grad_cols = vec![T::zero(); rows * hw];
            gemm(
                rows,
                hw,
                g.out_channels,
                T::one(),
                kernels.data(),
                Op::T,
                grad_out.data(),
                Op::N,
                T::zero(),
                &mut grad_cols,
            );
            if g.kernel == 1 {
                grad_cols
            } else {
                col2im(&grad_cols, g.in_channels, g.height, g.width, g.kernel)
            }
        }
    };
    Ok(LayerGrads {
        grad_weights,
        grad_bias,
        grad_input: Tensor::from_vec(cached_input.shape(), grad_input)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{finite_diff_grad, max_relative_error};
    use crate::rng::SeededRng;

    /// Six nested loops over the zero-padded input.
    fn naive_conv(input: &Tensor<f64>, kernels: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
        let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (o_n, k) = (kernels.shape()[0], kernels.shape()[2]);
        let p = (k / 2) as isize;
        let mut out = Tensor::zeros(&[o_n, h, w]);
        for o in 0..o_n {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = bias.data()[o];
                    for c in 0..c_in {
                        for u in 0..k {
                            for v in 0..k {
                                let (y, x) = (i as isize + u as isize - p, j as isize + v as isize - p);
                                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                    continue;
                                }
                                acc += kernels.data()[((o * c_in + c) * k + u) * k + v]
                                    * input.data()[(c * h + y as usize) * w + x as usize];
                            }
                        }
                    }
                    out.data_mut()[(o * h + i) * w + j] = acc;
                }
            }
        }
        out
    }

    fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    #[test]
    fn first_layer_shape() {
        let input = Tensor::<f32>::zeros(&[1, 32, 32]);
        let kernels = Tensor::zeros(&[64, 1, 11, 11]);
        let out = conv2d_forward(&input, &kernels, &Tensor::zeros(&[64])).unwrap();
        assert_eq!(out.shape(), &[64, 32, 32]);
    }

    #[test]
    fn identity_kernel() {
        let mut rng = SeededRng::new(5);
        let input = random(&[1, 6, 4], &mut rng);
        let kernels = Tensor::filled(&[1, 1, 1, 1], 1.0);
        let out = conv2d_forward(&input, &kernels, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(out.data(), input.data());
        let grads = conv2d_backward(&out, &input, &kernels).unwrap();
        assert_eq!(grads.grad_input.data(), out.data());
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = SeededRng::new(9);
        // few outputs take the direct path, many outputs and 1x1 the patch path
        for shape in [[3, 2, 3, 3], [6, 2, 5, 5], [5, 3, 1, 1], [1, 4, 7, 7]] {
            let input = random(&[shape[1], 5, 6], &mut rng);
            let kernels = random(&shape, &mut rng);
            let bias = random(&[shape[0]], &mut rng);
            let fast = conv2d_forward(&input, &kernels, &bias).unwrap();
            let slow = naive_conv(&input, &kernels, &bias);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{shape:?}");
            }
        }
    }

    #[test]
    fn kernel_larger_than_image() {
        let mut rng = SeededRng::new(2);
        let input = random(&[2, 3, 4], &mut rng);
        let kernels = random(&[2, 2, 7, 7], &mut rng);
        let bias = random(&[2], &mut rng);
        let fast = conv2d_forward(&input, &kernels, &bias).unwrap();
        let slow = naive_conv(&input, &kernels, &bias);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn even_kernel_and_channel_mismatch() {
        let input = Tensor::<f32>::zeros(&[2, 4, 4]);
        let even = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(matches!(
            conv2d_forward(&input, &even, &Tensor::zeros(&[1])),
            Err(Error::Config(_))
        ));
        let wrong_c = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d_forward(&input, &wrong_c, &Tensor::zeros(&[1])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = SeededRng::new(4);
        let input = random(&[2, 5, 5], &mut rng);
        let kernels = random(&[3, 2, 3, 3], &mut rng);
        let grads = conv2d_backward(&Tensor::zeros(&[3, 5, 5]), &input, &kernels).unwrap();
        assert!(grads.grad_weights.data().iter().all(|&v| v == 0.0));
        assert!(grads.grad_bias.data().iter().all(|&v| v == 0.0));
        assert!(grads.grad_input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = SeededRng::new(8);
        let (c, h, w, k) = (2, 4, 5, 3);
        let x: Vec<f64> = (0..c * h * w).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..c * k * k * h * w).map(|_| rng.normal()).collect();
        let lhs: f64 = im2col(&x, c, h, w, k).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, c, h, w, k)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let shapes = [[3, 2, 3, 3], [6, 2, 3, 3], [4, 3, 1, 1], [1, 2, 5, 5], [7, 1, 3, 3]];
        for (seed, shape) in shapes.into_iter().enumerate() {
            let mut rng = SeededRng::new(40 + seed as u64);
            let input = random(&[shape[1], 5, 5], &mut rng);
            let kernels = random(&shape, &mut rng);
            let bias = random(&[shape[0]], &mut rng);
            let probe = random(&[shape[0], 5, 5], &mut rng);
            let project = |t: Tensor<f64>| -> f64 { t.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum() };
            let grads = conv2d_backward(&probe, &input, &kernels).unwrap();
            let num_k = finite_diff_grad(|k| project(conv2d_forward(&input, k, &bias).unwrap()), &kernels, 1e-5);
            let num_x = finite_diff_grad(|x| project(conv2d_forward(x, &kernels, &bias).unwrap()), &input, 1e-5);
            let num_b = finite_diff_grad(|b| project(conv2d_forward(&input, &kernels, b).unwrap()), &bias, 1e-5);
            assert!(max_relative_error(&grads.grad_weights, &num_k) < 1e-6);
            assert!(max_relative_error(&grads.grad_input, &num_x) < 1e-6);
            assert!(max_relative_error(&grads.grad_bias, &num_b) < 1e-6);
        }
    }
}
