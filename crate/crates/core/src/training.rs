//! Patch datasets and the mini-batch Adam training loop.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evaluation::{list_images, psnr};
use crate::fileio::write_atomic;
use crate::models::{Architecture, AsrNetParams, CsrNetParams, Model, Network, StackShape, TensorSet};
use crate::nn::{adam_step, mse_loss, AdamConfig, AdamState};
use crate::pnm::read_gray;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::sensing::SensingConfig;
use crate::tensor::Tensor;

pub const DEFAULT_TRAIN_STRIDE: usize = 14;
pub const DEFAULT_VAL_STRIDE: usize = 21;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,val_psnr_db,seconds";

/// Samples per gradient-reduction chunk. Chunks are summed in index order,
/// so results do not depend on the number of worker threads.
const REDUCTION_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
        })
    }
}

/// Square luminance patches in `[0, 1]` plus where they came from.
#[derive(Clone, Debug)]
pub struct PatchDataset<T> {
    pub patches: Vec<Tensor<T>>,
    pub split: Split,
    pub block_size: usize,
    pub stride: usize,
    /// Source names in extraction order.
    pub sources: Vec<String>,
}

impl<T: Scalar> PatchDataset<T> {
    /// Extracts patches from in-memory `H x W` images, in the given order.
    pub fn from_images(images: &[(String, Tensor<T>)], block_size: usize, stride: usize, split: Split) -> Result<Self> {
        if block_size == 0 || stride == 0 {
            return Err(Error::config(format!(
                "patch size and stride must be positive, got {block_size} and {stride}"
            )));
        }
        let mut patches = Vec::new();
        for (_, image) in images {
            patches.extend(extract_patches(image, block_size, stride)?);
        }
        Ok(PatchDataset {
            patches,
            split,
            block_size,
            stride,
            sources: images.iter().map(|(n, _)| n.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Number of top-left anchored `block x block` windows at `stride`.
pub fn patch_count(height: usize, width: usize, block: usize, stride: usize) -> usize {
    if height < block || width < block || stride == 0 {
        return 0;
    }
    ((height - block) / stride + 1) * ((width - block) / stride + 1)
}

/// Row-major windows of an `H x W` image; partial windows are dropped.
pub fn extract_patches<T: Scalar>(image: &Tensor<T>, block: usize, stride: usize) -> Result<Vec<Tensor<T>>> {
    let &[height, width] = image.shape() else {
        return Err(Error::dim("extract_patches (expected rank 2)", image.shape(), &[0, 0]));
    };
    if height < block || width < block {
        return Ok(Vec::new());
    }
    let data = image.data();
    let mut out = Vec::with_capacity(patch_count(height, width, block, stride));
    for top in (0..=height - block).step_by(stride) {
        for left in (0..=width - block).step_by(stride) {
            out.push(Tensor::from_fn(&[block, block], |i| {
                data[(top + i / block) * width + left + i % block]
            }));
        }
    }
    Ok(out)
}

/// Loads every netpbm image of `dir` in lexicographic order and extracts
/// patches. Unreadable images are skipped with a warning.
pub fn build_dataset<T: Scalar>(dir: &Path, block_size: usize, stride: usize, split: Split) -> Result<PatchDataset<T>> {
    let mut images = Vec::new();
    for path in list_images(dir)? {
        match read_gray::<T>(&path) {
            Ok(img) => images.push((path.file_name().unwrap_or_default().to_string_lossy().into_owned(), img)),
            Err(e) => warn!("skipping {}: {e}", path.display()),
        }
    }
    let set = PatchDataset::from_images(&images, block_size, stride, split)?;
    if set.is_empty() {
        return Err(Error::config(format!(
            "no {block_size}x{block_size} patches found in {} ({} usable images)",
            dir.display(),
            images.len()
        )));
    }
    info!("{split} set: {} patches from {} images", set.len(), images.len());
    Ok(set)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub architecture: Architecture,
    pub sensing: SensingConfig,
    pub stack: StackShape,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Drives initialization, CSRNet's measurement matrix and shuffling.
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables checkpoints.
    pub checkpoint_interval: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub train_stride: usize,
    pub val_stride: usize,
    /// Halve the learning rate every this many epochs.
    pub lr_halving_interval: Option<usize>,
    /// Give ASRNet's sampling layer a bias.
    pub sampling_bias: bool,
}

impl TrainingConfig {
    pub fn new(architecture: Architecture, sensing: SensingConfig) -> Self {
        TrainingConfig {
            architecture,
            sensing,
            stack: StackShape::DEFAULT,
            epochs: 30,
            batch_size: DEFAULT_BATCH_SIZE,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_interval: 0,
            checkpoint_dir: None,
            train_stride: DEFAULT_TRAIN_STRIDE,
            val_stride: DEFAULT_VAL_STRIDE,
            lr_halving_interval: None,
            sampling_bias: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.train_stride == 0 || self.val_stride == 0 {
            return Err(Error::config(format!(
                "epochs, batch size and strides must be at least 1 (epochs {}, batch {}, strides {}/{})",
                self.epochs, self.batch_size, self.train_stride, self.val_stride
            )));
        }
        if self.lr_halving_interval == Some(0) {
            return Err(Error::config("learning-rate halving interval must be at least 1"));
        }
        self.stack.validate()?;
        self.adam.validate()
    }

    /// Learning rate in effect during a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_halving_interval {
            Some(k) => self.adam.lr * 0.5f64.powi(((epoch - 1) / k) as i32),
            None => self.adam.lr,
        }
    }

    /// Freshly initialized network for this configuration.
    pub fn init_model<T: Scalar>(&self) -> Result<Model<T>> {
        Ok(match self.architecture {
            Architecture::CsrNet => CsrNetParams::init(self.sensing, self.stack, self.seed, self.seed)?.into(),
            Architecture::AsrNet => AsrNetParams::init(self.sensing, self.stack, self.seed, self.sampling_bias)?.into(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_psnr_db: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:.6},{:.3}",
                r.epoch, r.train_loss, r.val_loss, r.val_psnr_db, r.seconds
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    /// Record with the highest validation PSNR; the earliest wins ties.
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.val_psnr_db >= r.val_psnr_db => Some(b),
                _ => Some(r),
            })
    }
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome<N> {
    pub final_params: N,
    /// Parameters after the epoch with the best validation PSNR.
    pub best_params: N,
    pub best_epoch: usize,
    pub history: TrainingHistory,
}

/// Mean MSE and mean per-patch PSNR of `params` on a dataset.
pub fn validate<T: Scalar, N: Network<T>>(params: &N, val_set: &PatchDataset<T>) -> Result<(f64, f64)> {
    if val_set.is_empty() {
        return Err(Error::config("validation set is empty"));
    }
    let per_patch = val_set
        .patches
        .par_iter()
        .map(|patch| {
            let out = params.predict(&params.training_input(patch)?)?;
            let out = out.reshape(patch.shape())?;
            let (loss, _) = mse_loss(&out, patch)?;
            Ok((loss.to_f64_lossy(), psnr(patch, &out)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_patch.len() as f64;
    let (loss, db) = per_patch.iter().fold((0.0, 0.0), |(l, p), &(a, b)| (l + a, p + b));
    Ok((loss / n, db / n))
}

/// Summed loss and gradients over `inputs[idx]` for every index, reduced in a
/// fixed order.
fn batch_gradients<T: Scalar, N: Network<T>>(
    params: &N,
    inputs: &[Tensor<T>],
    targets: &[Tensor<T>],
    indices: &[usize],
) -> Result<(f64, N::Grads)> {
    let partials = indices
        .par_chunks(REDUCTION_CHUNK)
        .map(|chunk| {
            let mut grads = params.zero_grads();
            let mut loss = 0.0;
            for &i in chunk {
                let (l, g) = params.loss_and_grads(&inputs[i], &targets[i])?;
                loss += l.to_f64_lossy();
                grads.accumulate(&g)?;
            }
            Ok((loss, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = partials.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        grads.accumulate(&g)?;
    }
    Ok((loss, grads))
}

/// Trains `params` in place of a copy and returns final and best parameters.
///
/// Each epoch shuffles the training set with a permutation drawn from the
/// seed, takes one Adam step per mini-batch on the batch-mean MSE, then
/// validates. A non-finite batch loss aborts with a numeric error.
pub fn train_network<T, N>(
    config: &TrainingConfig,
    params: N,
    train_set: &PatchDataset<T>,
    val_set: &PatchDataset<T>,
) -> Result<TrainingOutcome<N>>
where
    T: Scalar,
    N: Network<T>,
    Model<T>: From<N>,
{
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if val_set.is_empty() {
        return Err(Error::config("validation set is empty"));
    }
    let b = params.sensing().block_size;
    if train_set.block_size != b || val_set.block_size != b {
        return Err(Error::config(format!(
            "patch size {}/{} does not match block size {b}",
            train_set.block_size, val_set.block_size
        )));
    }

    let mut params = params;
    let inputs = train_set
        .patches
        .par_iter()
        .map(|p| params.training_input(p))
        .collect::<Result<Vec<_>>>()?;
    let targets = &train_set.patches;
    let mut states: Vec<AdamState<T>> = params.tensors().iter().map(|t| AdamState::new(t.shape())).collect();
    let mut rng = SeededRng::new(config.seed ^ 0x5348_5546_464c_4521);
    let mut history = TrainingHistory::default();
    let mut best: Option<(usize, f64, N)> = None;

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let adam = AdamConfig {
            lr: config.lr_at(epoch),
            ..config.adam
        };
        let order = rng.permutation(train_set.len());
        let mut epoch_loss = 0.0;
        for (batch_index, batch) in order.chunks(config.batch_size).enumerate() {
            let (loss_sum, mut grads) = batch_gradients(&params, &inputs, targets, batch)?;
            let loss = loss_sum / batch.len() as f64;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss {loss} at epoch {epoch}, batch {batch_index}"
                )));
            }
            epoch_loss += loss_sum;
            grads.scale_all(T::one() / T::of(batch.len() as f64));
            for ((param, grad), state) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(&mut states) {
                adam_step(param, grad, state, &adam)?;
            }
            params.touch();
        }
        let (val_loss, val_psnr_db) = validate(&params, val_set)?;
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            val_loss,
            val_psnr_db,
            seconds: start.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: train loss {:.6e}, val loss {:.6e}, val PSNR {:.3} dB, {:.1} s",
            record.train_loss, record.val_loss, record.val_psnr_db, record.seconds
        );
        history.records.push(record);
        if best.as_ref().is_none_or(|(_, db, _)| val_psnr_db > *db) {
            best = Some((epoch, val_psnr_db, params.clone()));
        }
        if let Some(dir) = &config.checkpoint_dir {
            if config.checkpoint_interval > 0 && epoch % config.checkpoint_interval == 0 {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                Model::from(params.clone()).save(&dir.join(format!("epoch_{epoch:04}.cscn")))?;
                history.write_csv(&dir.join("history.csv"))?;
            }
        }
    }

    let (best_epoch, _, best_params) = best.expect("at least one epoch");
    Ok(TrainingOutcome {
        final_params: params,
        best_params,
        best_epoch,
        history,
    })
}

/// Initializes the configured architecture and trains it.
pub fn train<T: Scalar>(
    config: &TrainingConfig,
    train_set: &PatchDataset<T>,
    val_set: &PatchDataset<T>,
) -> Result<TrainingOutcome<Model<T>>> {
    fn wrap<T: Scalar, N>(o: TrainingOutcome<N>) -> TrainingOutcome<Model<T>>
    where
        Model<T>: From<N>,
    {
        TrainingOutcome {
            final_params: o.final_params.into(),
            best_params: o.best_params.into(),
            best_epoch: o.best_epoch,
            history: o.history,
        }
    }
    config.validate()?;
    Ok(match config.init_model::<T>()? {
        Model::CsrNet(p) => wrap(train_network(config, p, train_set, val_set)?),
        Model::AsrNet(p) => wrap(train_network(config, p, train_set, val_set)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[h, w], |i| i as f64 / (h * w) as f64)
    }

    #[test]
    fn count_for_256_at_stride_14() {
        assert_eq!(patch_count(256, 256, 32, 14), 289);
        assert_eq!(extract_patches(&ramp(256, 256), 32, 14).unwrap().len(), 289);
    }

    #[test]
    fn exact_fit_gives_one_patch() {
        let img = ramp(32, 32);
        for stride in [1, 7, 50] {
            let p = extract_patches(&img, 32, stride).unwrap();
            assert_eq!(p.len(), 1);
            assert_eq!(p[0], img);
        }
    }

    #[test]
    fn small_images_contribute_nothing() {
        assert_eq!(patch_count(31, 100, 32, 1), 0);
        assert!(extract_patches(&ramp(31, 100), 32, 1).unwrap().is_empty());
    }

    #[test]
    fn patches_are_row_major_windows() {
        let img = ramp(5, 6);
        let p = extract_patches(&img, 2, 2).unwrap();
        assert_eq!(p.len(), 2 * 3);
        // second window of the second row starts at (2, 2)
        assert_eq!(p[4].data(), &[img.data()[14], img.data()[15], img.data()[20], img.data()[21]]);
    }

    #[test]
    fn lr_schedule() {
        let mut c = TrainingConfig::new(Architecture::AsrNet, SensingConfig::new(8, 0.25).unwrap());
        assert_eq!(c.lr_at(45), 1e-3);
        c.lr_halving_interval = Some(20);
        assert_eq!(c.lr_at(20), 1e-3);
        assert_eq!(c.lr_at(21), 5e-4);
        assert_eq!(c.lr_at(41), 2.5e-4);
    }

    #[test]
    fn config_rejects_zero_sizes() {
        let base = TrainingConfig::new(Architecture::AsrNet, SensingConfig::new(8, 0.25).unwrap());
        assert!(base.validate().is_ok());
        for f in [
            |c: &mut TrainingConfig| c.epochs = 0,
            |c: &mut TrainingConfig| c.batch_size = 0,
            |c: &mut TrainingConfig| c.train_stride = 0,
            |c: &mut TrainingConfig| c.lr_halving_interval = Some(0),
        ] {
            let mut c = base.clone();
            f(&mut c);
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn best_prefers_earliest_maximum() {
        let rec = |epoch, db| EpochRecord {
            epoch,
            train_loss: 0.0,
            val_loss: 0.0,
            val_psnr_db: db,
            seconds: 0.0,
        };
        let h = TrainingHistory {
            records: vec![rec(1, 10.0), rec(2, 12.0), rec(3, 12.0), rec(4, 11.0)],
        };
        assert_eq!(h.best().unwrap().epoch, 2);
        assert!(h.to_csv().starts_with("epoch,train_loss,val_loss,val_psnr_db,seconds\n1,"));
    }
}
