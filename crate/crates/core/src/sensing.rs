//! Block compressive sampling: measurement-rate arithmetic, random
//! orthonormal measurement matrices, block tiling and the adjoint baseline.

use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::fileio::{put_f32s, read_file, write_atomic, ByteReader};
use crate::linalg::{gemm, Op};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_BLOCK_SIZE: usize = 32;

/// Measurement rates evaluated throughout the toolkit's benchmarks.
pub const STANDARD_RATES: [f64; 4] = [0.25, 0.10, 0.04, 0.01];

const MATRIX_MAGIC: &[u8; 4] = b"CSMM";
const MATRIX_VERSION: u32 = 1;

/// Number of measurements per block: `max(1, floor(B^2 * rate))`.
pub fn measurements_for_rate(block_size: usize, rate: f64) -> Result<usize> {
    if block_size == 0 {
        return Err(Error::config("block size must be at least 1"));
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::config(format!("measurement rate {rate} outside (0, 1]")));
    }
    let n = block_size * block_size;
    // The slack absorbs representation error such as 100 * 0.7 = 69.999...
    let m = ((n as f64) * rate + 1e-9).floor() as usize;
    Ok(m.clamp(1, n))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensingConfig {
    pub block_size: usize,
    pub rate: f64,
    pub measurements: usize,
}

impl SensingConfig {
    pub fn new(block_size: usize, rate: f64) -> Result<Self> {
        Ok(SensingConfig {
            block_size,
            rate,
            measurements: measurements_for_rate(block_size, rate)?,
        })
    }

    /// Rebuilds a configuration from a stored measurement count; the rate
    /// becomes the effective `m / B^2`.
    pub fn from_measurements(block_size: usize, measurements: usize) -> Result<Self> {
        let n = block_size * block_size;
        if block_size == 0 || measurements == 0 || measurements > n {
            return Err(Error::config(format!(
                "{measurements} measurements invalid for block size {block_size}"
            )));
        }
        Ok(SensingConfig {
            block_size,
            rate: measurements as f64 / n as f64,
            measurements,
        })
    }

    pub fn pixels(&self) -> usize {
        self.block_size * self.block_size
    }

    pub fn effective_rate(&self) -> f64 {
        self.measurements as f64 / self.pixels() as f64
    }
}

/// `m x n` matrix with orthonormal rows, reproducible from `(m, n, seed)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementMatrix {
    rows: usize,
    cols: usize,
    seed: u64,
    entries: Vec<f64>,
}

impl MeasurementMatrix {
    /// Draws an i.i.d. standard normal `m x n` matrix and orthonormalizes its
    /// rows. A numerically rank-deficient draw is retried with `seed + 1`;
    /// the recorded seed stays the requested one, so regeneration retraces
    /// the same retries.
    pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Result<Self> {
        if rows == 0 || rows > cols {
            return Err(Error::config(format!(
                "cannot build {rows} orthonormal rows in {cols}-dimensional space"
            )));
        }
        let mut attempt_seed = seed;
        loop {
            let mut rng = SeededRng::new(attempt_seed);
            let mut entries: Vec<f64> = (0..rows * cols).map(|_| rng.normal()).collect();
            if orthonormalize_rows(&mut entries, rows, cols) {
                return Ok(MeasurementMatrix {
                    rows,
                    cols,
                    seed,
                    entries,
                });
            }
            log::warn!("measurement matrix draw with seed {attempt_seed} is rank deficient, retrying");
            attempt_seed = attempt_seed.wrapping_add(1);
        }
    }

    /// Wraps explicit entries; rows are assumed orthonormal by the caller.
    pub fn from_entries(rows: usize, cols: usize, seed: u64, entries: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || entries.len() != rows * cols {
            return Err(Error::dim("measurement matrix", &[rows, cols], &[entries.len()]));
        }
        Ok(MeasurementMatrix {
            rows,
            cols,
            seed,
            entries,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// The matrix as an `m x n` tensor of the requested precision.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.rows, self.cols], |i| T::of(self.entries[i]))
    }

    /// `max |(Phi Phi^T - I)_ij|`.
    pub fn orthonormality_residual(&self) -> f64 {
        let m = self.rows;
        let mut gram = vec![0.0; m * m];
        gemm(m, m, self.cols, 1.0, &self.entries, Op::N, &self.entries, Op::T, 0.0, &mut gram);
        gram.iter()
            .enumerate()
            .map(|(idx, &g)| {
                let target = if idx / m == idx % m { 1.0 } else { 0.0 };
                (g - target).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Serialized form: magic `CSMM`, version, `m`, `n` (u32), seed (u64),
    /// then `m n` row-major f32 entries, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 4 * self.entries.len());
        out.extend_from_slice(MATRIX_MAGIC);
        out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_f32s(&mut out, self.entries.iter().map(|&v| v as f32));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "measurement matrix file");
        r.magic(MATRIX_MAGIC)?;
        let version = r.u32()?;
        if version != MATRIX_VERSION {
            return Err(FormatError::UnsupportedVersion {
                what: "measurement matrix",
                version,
            }
            .into());
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let seed = r.u64()?;
        let entries = r.f32s(rows.saturating_mul(cols))?;
        r.finish()?;
        Self::from_entries(rows, cols, seed, entries.into_iter().map(f64::from).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// Classical Gram-Schmidt with one re-orthogonalization pass, row by row.
/// Returns false if some row loses (numerically) all of its norm.
fn orthonormalize_rows(a: &mut [f64], rows: usize, cols: usize) -> bool {
    let mut coeffs = vec![0.0; rows];
    for i in 0..rows {
        let (done, rest) = a.split_at_mut(i * cols);
        let row = &mut rest[..cols];
        let norm0 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if i > 0 {
            for _ in 0..2 {
                let c = &mut coeffs[..i];
                gemm(i, 1, cols, 1.0, done, Op::N, row, Op::N, 0.0, c);
                // row <- row - Q^T c
                let mut proj = vec![0.0; cols];
                gemm(cols, 1, i, 1.0, done, Op::T, c, Op::N, 0.0, &mut proj);
                for (r, p) in row.iter_mut().zip(&proj) {
                    *r -= p;
                }
            }
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-10 * norm0.max(f64::MIN_POSITIVE)) {
            return false;
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    true
}

/// Bookkeeping for cutting an image into `B x B` blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGeometry {
    pub block_size: usize,
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    pub blocks_down: usize,
    pub blocks_across: usize,
}

impl BlockGeometry {
    pub fn new(height: usize, width: usize, block_size: usize) -> Result<Self> {
        if height == 0 || width == 0 || block_size == 0 {
            return Err(Error::config(format!(
                "cannot tile a {height}x{width} image into {block_size}x{block_size} blocks"
            )));
        }
        let blocks_down = height.div_ceil(block_size);
        let blocks_across = width.div_ceil(block_size);
        Ok(BlockGeometry {
            block_size,
            height,
            width,
            padded_height: blocks_down * block_size,
            padded_width: blocks_across * block_size,
            blocks_down,
            blocks_across,
        })
    }

    pub fn block_count(&self) -> usize {
        self.blocks_down * self.blocks_across
    }
}

fn image_dims<T: Scalar>(image: &Tensor<T>) -> Result<(usize, usize)> {
    match *image.shape() {
        [h, w] => Ok((h, w)),
        _ => Err(Error::dim("image (expected rank 2)", image.shape(), &[0, 0])),
    }
}

/// Cuts an `H x W` image into row-major `B x B` blocks, replicating the
/// last row and column to fill partial blocks.
pub fn tile_blocks<T: Scalar>(image: &Tensor<T>, block_size: usize) -> Result<(Vec<Tensor<T>>, BlockGeometry)> {
    let (h, w) = image_dims(image)?;
    let geom = BlockGeometry::new(h, w, block_size)?;
    let src = image.data();
    let mut blocks = Vec::with_capacity(geom.block_count());
    for by in 0..geom.blocks_down {
        for bx in 0..geom.blocks_across {
            let block = Tensor::from_fn(&[block_size, block_size], |idx| {
                let y = (by * block_size + idx / block_size).min(h - 1);
                let x = (bx * block_size + idx % block_size).min(w - 1);
                src[y * w + x]
            });
            blocks.push(block);
        }
    }
    Ok((blocks, geom))
}

/// Inverse of [`tile_blocks`]: places blocks in row-major order and crops
/// to the original size.
pub fn assemble_blocks<T: Scalar>(blocks: &[Tensor<T>], geom: &BlockGeometry) -> Result<Tensor<T>> {
    let b = geom.block_size;
    if blocks.len() != geom.block_count() {
        return Err(Error::dim(
            "assemble_blocks block count",
            &[blocks.len()],
            &[geom.blocks_down, geom.blocks_across],
        ));
    }
    for block in blocks {
        block.ensure_shape("assemble_blocks block", &[b, b])?;
    }
    let w = geom.width;
    Ok(Tensor::from_fn(&[geom.height, w], |idx| {
        let (y, x) = (idx / w, idx % w);
        let block = &blocks[(y / b) * geom.blocks_across + x / b];
        block.data()[(y % b) * b + x % b]
    }))
}

/// `y = Phi vec(block)` with row-major vectorization, using a matrix already
/// converted to the working precision.
pub fn sample_with<T: Scalar>(block: &Tensor<T>, phi: &Tensor<T>) -> Result<Tensor<T>> {
    let &[m, n] = phi.shape() else {
        return Err(Error::dim("measurement operator", phi.shape(), &[0, 0]));
    };
    if block.len() != n {
        return Err(Error::dim("block_sample", block.shape(), phi.shape()));
    }
    let mut y = Tensor::zeros(&[m]);
    gemm(m, 1, n, T::one(), phi.data(), Op::N, block.data(), Op::N, T::zero(), y.data_mut());
    Ok(y)
}

pub fn block_sample<T: Scalar>(block: &Tensor<T>, phi: &MeasurementMatrix) -> Result<Tensor<T>> {
    if block.len() != phi.cols() {
        return Err(Error::dim("block_sample", block.shape(), &[phi.rows(), phi.cols()]));
    }
    sample_with(block, &phi.to_tensor())
}

/// `reshape(Phi^T y)` with a matrix already in the working precision.
pub fn adjoint_with<T: Scalar>(y: &Tensor<T>, phi: &Tensor<T>) -> Result<Tensor<T>> {
    let &[m, n] = phi.shape() else {
        return Err(Error::dim("measurement operator", phi.shape(), &[0, 0]));
    };
    let side = (n as f64).sqrt().round() as usize;
    if y.len() != m || side * side != n {
        return Err(Error::dim("adjoint_baseline", y.shape(), phi.shape()));
    }
    let mut x = Tensor::zeros(&[side, side]);
    gemm(n, 1, m, T::one(), phi.data(), Op::T, y.data(), Op::N, T::zero(), x.data_mut());
    Ok(x)
}

/// Minimum-norm linear reconstruction `reshape(Phi^T y)`; the exact
/// pseudo-inverse because the rows of `Phi` are orthonormal.
pub fn adjoint_baseline<T: Scalar>(y: &Tensor<T>, phi: &MeasurementMatrix) -> Result<Tensor<T>> {
    if y.len() != phi.rows() {
        return Err(Error::dim("adjoint_baseline", y.shape(), &[phi.rows(), phi.cols()]));
    }
    adjoint_with(y, &phi.to_tensor())
}
