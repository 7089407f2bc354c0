//! `cascade-cs` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use cascade_cs::evaluation::{self, psnr, EvalGroup, EvalReport, EvalRow, TimingConfig};
use cascade_cs::gradcheck;
use cascade_cs::nn::AdamConfig;
use cascade_cs::pnm::{read_gray, write_pgm};
use cascade_cs::training::{self, build_dataset, Split, TrainingConfig};
use cascade_cs::{synth, Architecture, Error, MeasurementMatrix, Model32, SensingConfig};

const THREADS_ENV: &str = "CASCADE_CS_THREADS";

#[derive(Parser, Debug)]
#[command(name = "cascade-cs", version, about = "Block compressive sensing with cascaded CNN reconstruction")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,

    /// More log output; repeat for debug detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a random measurement matrix with orthonormal rows.
    Genmatrix {
        /// Measurement rate in (0, 1].
        #[arg(long)]
        mr: f64,
        /// Block side length.
        #[arg(long, default_value_t = 32)]
        block: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on a directory of images.
    Train(TrainArgs),
    /// Reconstruct one image with a trained model.
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Ground truth for PSNR; defaults to the input image.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Write a one-image CSV report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Check a CSRNet model against this matrix file.
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// PSNR and timing of models over a directory of test images.
    Bench {
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        testdir: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        /// Also write every reconstruction here.
        #[arg(long)]
        recon_dir: Option<PathBuf>,
        /// Timed repetitions per image; the median is reported.
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        /// Check every parameter of the network checks instead of a sample.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write procedural grayscale test images.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    arch: Architecture,
    #[arg(long)]
    mr: f64,
    #[arg(long, default_value_t = 32)]
    block: usize,
    /// Training image directory.
    #[arg(long)]
    data: PathBuf,
    /// Validation image directory.
    #[arg(long)]
    val: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    eps: f64,
    #[arg(long, default_value_t = training::DEFAULT_BATCH_SIZE)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = training::DEFAULT_TRAIN_STRIDE)]
    train_stride: usize,
    #[arg(long, default_value_t = training::DEFAULT_VAL_STRIDE)]
    val_stride: usize,
    /// Halve the learning rate every N epochs.
    #[arg(long)]
    lr_halving: Option<usize>,
    /// Give ASRNet's sampling layer a bias.
    #[arg(long)]
    sampling_bias: bool,
    /// Checkpoint every N epochs into `<out>.checkpoints/`; 0 disables.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Best-by-validation model.
    #[arg(long)]
    out: PathBuf,
    /// Model after the last epoch.
    #[arg(long)]
    final_out: Option<PathBuf>,
    /// Freshly initialized model, before any update.
    #[arg(long)]
    init_out: Option<PathBuf>,
    /// History CSV; defaults to `<out>.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numeric(_) => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn sensing(block: usize, mr: f64) -> Result<SensingConfig, Failure> {
    SensingConfig::new(block, mr).map_err(|e| usage(e.to_string()))
}

fn genmatrix(mr: f64, block: usize, seed: u64, out: &Path) -> Result<(), Failure> {
    let config = sensing(block, mr)?;
    let phi = MeasurementMatrix::gaussian(config.measurements, config.pixels(), seed)?;
    phi.save(out)?;
    println!(
        "m = {}, n = {}, orthonormality residual = {:.3e}",
        phi.rows(),
        phi.cols(),
        phi.orthonormality_residual()
    );
    Ok(())
}

fn train(args: &TrainArgs) -> Result<(), Failure> {
    let mut config = TrainingConfig::new(args.arch, sensing(args.block, args.mr)?);
    config.epochs = args.epochs;
    config.batch_size = args.batch;
    config.adam = AdamConfig {
        lr: args.lr,
        beta1: args.beta1,
        beta2: args.beta2,
        eps: args.eps,
    };
    config.seed = args.seed;
    config.train_stride = args.train_stride;
    config.val_stride = args.val_stride;
    config.lr_halving_interval = args.lr_halving;
    config.sampling_bias = args.sampling_bias;
    config.checkpoint_interval = args.checkpoint_every;
    if args.checkpoint_every > 0 {
        config.checkpoint_dir = Some(with_suffix(&args.out, ".checkpoints"));
    }
    config.validate().map_err(|e| usage(e.to_string()))?;

    let train_set = build_dataset::<f32>(&args.data, args.block, config.train_stride, Split::Train)?;
    let val_set = build_dataset::<f32>(&args.val, args.block, config.val_stride, Split::Validation)?;
    println!("{} training patches, {} validation patches", train_set.len(), val_set.len());
    if let Some(path) = &args.init_out {
        config.init_model::<f32>()?.save(path)?;
    }

    let outcome = training::train(&config, &train_set, &val_set)?;
    outcome.best_params.save(&args.out)?;
    if let Some(path) = &args.final_out {
        outcome.final_params.save(path)?;
    }
    let history = args.history.clone().unwrap_or_else(|| with_suffix(&args.out, ".history.csv"));
    outcome.history.write_csv(&history)?;
    let last = outcome.history.records.last().expect("at least one epoch");
    println!(
        "final epoch {}: train loss {:.6e}, val PSNR {:.3} dB; best epoch {} saved to {}",
        last.epoch,
        last.train_loss,
        last.val_psnr_db,
        outcome.best_epoch,
        args.out.display()
    );
    Ok(())
}

fn reconstruct(
    model_path: &Path,
    input: &Path,
    output: &Path,
    truth: Option<&Path>,
    report: Option<&Path>,
    matrix: Option<&Path>,
) -> Result<(), Failure> {
    let model = Model32::load(model_path)?;
    if let Some(path) = matrix {
        let phi = MeasurementMatrix::load(path)?;
        let config = model.sensing();
        let seed = match &model {
            Model32::CsrNet(p) => p.matrix_seed,
            Model32::AsrNet(_) => {
                return Err(Failure::from(Error::Config(
                    "--matrix applies to csrnet models only; asrnet learns its own sampling".into(),
                )))
            }
        };
        if (phi.rows(), phi.cols(), phi.seed()) != (config.measurements, config.pixels(), seed) {
            return Err(Failure::from(Error::Config(format!(
                "matrix {} is {}x{} with seed {}, model expects {}x{} with seed {seed}",
                path.display(),
                phi.rows(),
                phi.cols(),
                phi.seed(),
                config.measurements,
                config.pixels()
            ))));
        }
    }
    let image = read_gray::<f32>(input)?;
    let (rec, seconds) = evaluation::reconstruct_image(&image, &model)?;
    write_pgm(output, &rec)?;
    let reference = match truth {
        Some(t) => read_gray::<f32>(t)?,
        None => image,
    };
    let db = psnr(&reference, &rec)?;
    println!(
        "{} at MR {:.4}: PSNR {db:.4} dB, {seconds:.6} s",
        model.architecture(),
        model.sensing().effective_rate()
    );
    if let Some(path) = report {
        let row = EvalRow {
            image: input.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            arch: model.architecture(),
            rate: model.sensing().effective_rate(),
            psnr_db: db,
            seconds,
        };
        let report = EvalReport {
            groups: vec![EvalGroup {
                arch: row.arch,
                rate: row.rate,
                rows: vec![row],
            }],
            threads: rayon::current_num_threads(),
        };
        cascade_cs::fileio::write_atomic(path, report.to_csv().as_bytes())?;
    }
    Ok(())
}

fn bench(
    models: &[PathBuf],
    testdir: &Path,
    csv: &Path,
    recon_dir: Option<&Path>,
    timing: TimingConfig,
) -> Result<(), Failure> {
    if timing.runs == 0 {
        return Err(usage("--runs must be at least 1"));
    }
    let models = models.iter().map(|p| Model32::load(p)).collect::<Result<Vec<_>, _>>()?;
    if let Some(dir) = recon_dir {
        std::fs::create_dir_all(dir).map_err(|e| Failure::from(Error::Io {
            path: dir.to_path_buf(),
            source: e,
        }))?;
    }
    let report = evaluation::benchmark(&models, testdir, Some(csv), recon_dir, timing)?;
    println!("threads: {}", report.threads);
    println!("{:<8} {:>7} {:>12} {:>10} {:>12}", "arch", "mr", "MACs/block", "PSNR dB", "seconds");
    for (model, group) in models.iter().zip(&report.groups) {
        println!(
            "{:<8} {:>7.4} {:>12} {:>10.4} {:>12.6}",
            group.arch.to_string(),
            group.rate,
            model.flop_count(),
            group.mean_psnr(),
            group.mean_seconds()
        );
    }
    Ok(())
}

fn run_gradcheck(full: bool, seed: u64) -> Result<(), Failure> {
    let results = gradcheck::run_suite(full, seed)?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{:<6} {:<22} max rel err {:.3e} ({} checked, {} skipped at kinks)",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.max_relative_error,
            r.checked,
            r.skipped
        );
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(Failure {
            code: 3,
            message: format!("{failed} gradient checks above {:e}", gradcheck::TOLERANCE),
        });
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("thread pool: {e}")))?;
    }
    info!("using {} worker threads", rayon::current_num_threads());
    match cli.command {
        Command::Genmatrix { mr, block, seed, out } => genmatrix(mr, block, seed, &out),
        Command::Train(args) => train(&args),
        Command::Reconstruct {
            model,
            input,
            output,
            truth,
            report,
            matrix,
        } => reconstruct(&model, &input, &output, truth.as_deref(), report.as_deref(), matrix.as_deref()),
        Command::Bench {
            models,
            testdir,
            csv,
            recon_dir,
            runs,
            warmup,
        } => bench(&models, &testdir, &csv, recon_dir.as_deref(), TimingConfig { warmup, runs }),
        Command::Gradcheck { full, seed } => run_gradcheck(full, seed),
        Command::Synth { out, count, size, seed } => {
            if size == 0 {
                return Err(usage("--size must be positive"));
            }
            synth::write_synthetic_corpus(&out, count, size, size, seed)?;
            println!("wrote {count} images to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
