//! Whole-image reconstruction, PSNR, and benchmark reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fileio::write_atomic;
use crate::models::{Architecture, Model};
use crate::pnm::{is_netpbm_path, read_gray, write_pgm};
use crate::scalar::Scalar;
use crate::sensing::{adjoint_with, assemble_blocks, sample_with, tile_blocks, MeasurementMatrix};
use crate::tensor::Tensor;

/// Reported for identical images, and the ceiling for any PSNR.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const CSV_HEADER: &str = "image,arch,mr,psnr_db,seconds";

/// PSNR in dB on the 8-bit scale. Both images are clamped to `[0, 1]`
/// and scaled by 255 without quantization.
pub fn psnr<T: Scalar>(reference: &Tensor<T>, test: &Tensor<T>) -> Result<f64> {
    if reference.shape() != test.shape() {
        return Err(Error::dim("psnr", reference.shape(), test.shape()));
    }
    let clamp = |v: T| v.to_f64_lossy().clamp(0.0, 1.0) * 255.0;
    let sse: f64 = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(&r, &t)| (clamp(r) - clamp(t)).powi(2))
        .sum();
    let mse = sse / reference.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Median of `runs` timed repetitions after `warmup` untimed ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimingConfig {
    pub warmup: usize,
    pub runs: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig { warmup: 1, runs: 5 }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Measurements of every block of `image`, in tiling order, plus the geometry.
fn acquire<T: Scalar>(image: &Tensor<T>, model: &Model<T>) -> Result<(Vec<Tensor<T>>, crate::sensing::BlockGeometry)> {
    let config = model.sensing();
    let (blocks, geom) = tile_blocks(image, config.block_size)?;
    let ys = blocks.iter().map(|b| model.measure(b)).collect::<Result<Vec<_>>>()?;
    Ok((ys, geom))
}

fn decode<T: Scalar>(
    ys: &[Tensor<T>],
    geom: &crate::sensing::BlockGeometry,
    model: &Model<T>,
) -> Result<Tensor<T>> {
    let blocks = ys.par_iter().map(|y| model.reconstruct(y)).collect::<Result<Vec<_>>>()?;
    Ok(assemble_blocks(&blocks, geom)?.clamp(T::zero(), T::one()))
}

/// Tile, sample, reconstruct every block, assemble, clamp to `[0, 1]`.
///
/// The returned seconds cover reconstruction and assembly only; sampling
/// happens before the clock starts.
pub fn reconstruct_image<T: Scalar>(image: &Tensor<T>, model: &Model<T>) -> Result<(Tensor<T>, f64)> {
    let (ys, geom) = acquire(image, model)?;
    let start = Instant::now();
    let out = decode(&ys, &geom, model)?;
    Ok((out, start.elapsed().as_secs_f64()))
}

/// Reconstruction plus the median reconstruction time over repeated runs.
pub fn timed_reconstruction<T: Scalar>(
    image: &Tensor<T>,
    model: &Model<T>,
    timing: TimingConfig,
) -> Result<(Tensor<T>, f64)> {
    let (ys, geom) = acquire(image, model)?;
    for _ in 0..timing.warmup {
        decode(&ys, &geom, model)?;
    }
    let mut times = Vec::with_capacity(timing.runs.max(1));
    let mut out = None;
    for _ in 0..timing.runs.max(1) {
        let start = Instant::now();
        let rec = decode(&ys, &geom, model)?;
        times.push(start.elapsed().as_secs_f64());
        out = Some(rec);
    }
    Ok((out.expect("at least one run"), median(times)))
}

/// Block-wise `Phi^T Phi x` reconstruction, clamped to `[0, 1]`.
pub fn reconstruct_adjoint<T: Scalar>(image: &Tensor<T>, phi: &MeasurementMatrix) -> Result<Tensor<T>> {
    let side = (phi.cols() as f64).sqrt().round() as usize;
    let op = phi.to_tensor::<T>();
    let (blocks, geom) = tile_blocks(image, side)?;
    let rec = blocks
        .iter()
        .map(|b| adjoint_with(&sample_with(b, &op)?, &op))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble_blocks(&rec, &geom)?.clamp(T::zero(), T::one()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image: String,
    pub arch: Architecture,
    pub rate: f64,
    pub psnr_db: f64,
    pub seconds: f64,
}

/// Rows for one model followed by their means.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalGroup {
    pub arch: Architecture,
    pub rate: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalGroup {
    pub fn mean_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.psnr_db).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_seconds(&self) -> f64 {
        self.rows.iter().map(|r| r.seconds).sum::<f64>() / self.rows.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub groups: Vec<EvalGroup>,
    /// Worker threads available while timing.
    pub threads: usize,
}

impl EvalReport {
    /// CSV with header [`CSV_HEADER`]; each model's image rows are followed
    /// by a `MEAN` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for g in &self.groups {
            for r in &g.rows {
                let _ = writeln!(out, "{},{},{:.4},{:.4},{:.6}", r.image, r.arch, r.rate, r.psnr_db, r.seconds);
            }
            let _ = writeln!(
                out,
                "MEAN,{},{:.4},{:.4},{:.6}",
                g.arch,
                g.rate,
                g.mean_psnr(),
                g.mean_seconds()
            );
        }
        out
    }
}

/// Netpbm files of `dir` in lexicographic order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_netpbm_path(p))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Reconstructs every image of `test_dir` with every model.
///
/// Rows are ordered by model, then by file name. When `recon_dir` is given
/// each reconstruction is written there as `<stem>_<arch>_<rate>.pgm`.
pub fn benchmark(
    models: &[Model<f32>],
    test_dir: &Path,
    output_csv: Option<&Path>,
    recon_dir: Option<&Path>,
    timing: TimingConfig,
) -> Result<EvalReport> {
    let paths = list_images(test_dir)?;
    if paths.is_empty() {
        return Err(Error::config(format!("no PGM/PPM images in {}", test_dir.display())));
    }
    if models.is_empty() {
        return Err(Error::config("benchmark needs at least one model"));
    }
    let images = paths
        .iter()
        .map(|p| Ok((p, read_gray::<f32>(p)?)))
        .collect::<Result<Vec<_>>>()?;

    let mut groups = Vec::with_capacity(models.len());
    for model in models {
        let rate = model.sensing().effective_rate();
        let mut rows = Vec::with_capacity(images.len());
        for (path, image) in &images {
            let (rec, seconds) = timed_reconstruction(image, model, timing)?;
            let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            if let Some(dir) = recon_dir {
                let stem = path.file_stem().unwrap_or_default().to_string_lossy();
                write_pgm(&dir.join(format!("{stem}_{}_{rate:.4}.pgm", model.architecture())), &rec)?;
            }
            rows.push(EvalRow {
                image: name,
                arch: model.architecture(),
                rate,
                psnr_db: psnr(image, &rec)?,
                seconds,
            });
        }
        groups.push(EvalGroup {
            arch: model.architecture(),
            rate,
            rows,
        });
    }
    let report = EvalReport {
        groups,
        threads: rayon::current_num_threads(),
    };
    if let Some(csv) = output_csv {
        write_atomic(csv, report.to_csv().as_bytes())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_hit_cap() {
        let a = Tensor::<f64>::from_fn(&[4, 4], |i| i as f64 / 16.0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn zeros_vs_ones_is_zero_db() {
        let z = Tensor::<f64>::zeros(&[8, 8]);
        let o = Tensor::filled(&[8, 8], 1.0);
        assert!(psnr(&z, &o).unwrap().abs() < 1e-12);
    }

    #[test]
    fn half_offset() {
        let z = Tensor::<f64>::filled(&[8, 8], 0.25);
        let o = Tensor::filled(&[8, 8], 0.75);
        let expect = 10.0 * 4f64.log10();
        assert!((psnr(&z, &o).unwrap() - expect).abs() < 1e-9);
        assert!((expect - 6.0206).abs() < 1e-4);
    }

    #[test]
    fn test_image_is_clamped() {
        let r = Tensor::<f64>::filled(&[2, 2], 1.0);
        let t = Tensor::filled(&[2, 2], 3.0);
        assert_eq!(psnr(&r, &t).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn csv_layout() {
        let row = EvalRow {
            image: "a.pgm".into(),
            arch: Architecture::AsrNet,
            rate: 0.25,
            psnr_db: 30.0,
            seconds: 0.5,
        };
        let report = EvalReport {
            groups: vec![EvalGroup {
                arch: Architecture::AsrNet,
                rate: 0.25,
                rows: vec![row],
            }],
            threads: 1,
        };
        assert_eq!(
            report.to_csv(),
            "image,arch,mr,psnr_db,seconds\na.pgm,asrnet,0.2500,30.0000,0.500000\nMEAN,asrnet,0.2500,30.0000,0.500000\n"
        );
    }
}
