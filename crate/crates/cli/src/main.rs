//! `charm`: dataset generation, preprocessing, training, prediction,
//! evaluation and benchmarking of conditioned heatmap regression models.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use charm_core::dental::Arch;
use charm_core::io::{load_train_config, IoError};
use charm_core::network::CheckpointError;
use charm_core::pipeline::{self, MixKind, PipelineError, PredictOptions};
use charm_core::synthetic::DatasetOptions;
use charm_core::training::{TrainConfig, TrainError};

/// Exit code for invalid arguments, missing files and invalid settings.
const EXIT_INPUT: u8 = 2;
/// Exit code for a non-finite loss or gradient during training.
const EXIT_NUMERIC: u8 = 3;
/// Exit code for malformed files and checkpoint integrity failures.
const EXIT_FORMAT: u8 = 4;

#[derive(Parser)]
#[command(name = "charm", version, about = "Dental landmark detection on point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MixArg {
    Uniform,
    Weighted,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Upper,
    Lower,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic annotated dataset split into train/val/test.
    Generate {
        #[arg(long)]
        count: usize,
        #[arg(long, value_enum, default_value = "weighted")]
        mix: MixArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Surface samples per tooth crown.
        #[arg(long)]
        points_per_tooth: Option<usize>,
        /// Surface samples on the gingiva.
        #[arg(long)]
        gingiva_points: Option<usize>,
    },
    /// Center, downsample and append the null point.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Mesh points kept after downsampling.
        #[arg(long, default_value_t = 10000)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write its checkpoint and history CSV.
    Train {
        /// Directory with train/ and val/ subdirectories, or a flat
        /// directory of training samples.
        #[arg(long)]
        data: PathBuf,
        /// JSON training configuration; missing keys take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Train the plain heatmap-regression baseline.
        #[arg(long)]
        baseline: bool,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Predict the landmarks of one cloud.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Mesh points kept when the input is not preprocessed.
        #[arg(long, default_value_t = TrainConfig::default().points)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Arch for tooth labels when the cloud does not record it.
        #[arg(long, value_enum)]
        arch: Option<ArchArg>,
    },
    /// Score a directory of predictions against ground-truth annotations.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Success radius, mm.
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
    },
    /// Time single-cloud inference over a dataset.
    Benchmark {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory; its test/ subdirectory is used when present.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = TrainConfig::default().points)]
        points: usize,
    },
}

fn io_exit(e: &IoError) -> u8 {
    match e {
        IoError::Io { .. } | IoError::UnknownFormat { .. } | IoError::Csv { .. } => EXIT_INPUT,
        IoError::Parse { .. } | IoError::Schema { .. } | IoError::Invalid { .. } => EXIT_FORMAT,
    }
}

fn exit_code(e: &PipelineError) -> u8 {
    match e {
        PipelineError::Io(e) => io_exit(e),
        PipelineError::Checkpoint { source, .. } => match source {
            CheckpointError::Io(_) => EXIT_INPUT,
            _ => EXIT_FORMAT,
        },
        PipelineError::Train(TrainError::NonFinite { .. }) => EXIT_NUMERIC,
        _ => EXIT_INPUT,
    }
}

fn run(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Generate {
            count,
            mix,
            seed,
            out,
            points_per_tooth,
            gingiva_points,
        } => {
            let mut options = DatasetOptions::default();
            options.points_per_tooth = points_per_tooth.unwrap_or(options.points_per_tooth);
            options.gingiva_points = gingiva_points.unwrap_or(options.gingiva_points);
            let mix = match mix {
                MixArg::Uniform => MixKind::Uniform,
                MixArg::Weighted => MixKind::Weighted,
            };
            let split = pipeline::generate(&out, count, &mix.mix(), seed, &options)?;
            println!(
                "wrote {count} samples to {}: {} train, {} val, {} test",
                out.display(),
                split.train.len(),
                split.val.len(),
                split.test.len()
            );
        }
        Command::Preprocess {
            input,
            out,
            points,
            seed,
        } => {
            let file = pipeline::preprocess_file(&input, &out, points, seed)?;
            println!("wrote {} points to {}", file.cloud.len(), out.display());
        }
        Command::Train {
            data,
            config,
            out,
            baseline,
            seed,
            epochs,
        } => {
            let mut cfg = match config {
                Some(path) => load_train_config(&path)?,
                None => TrainConfig::default(),
            };
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            let summary = pipeline::train_dir(&data, &cfg, &out, baseline, |r| {
                let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
                eprintln!(
                    "epoch {:>4}  lr {:.6}  loss {:.6}  mse {:.6}  bce {}  val_mede {}  val_f1 {}",
                    r.epoch,
                    r.lr,
                    r.loss,
                    r.mse,
                    fmt(r.bce),
                    fmt(r.val_mede),
                    fmt(r.val_f1)
                );
            })?;
            println!(
                "saved epoch {} to {} ({:.1} s)",
                summary.saved_epoch,
                out.display(),
                summary.seconds
            );
        }
        Command::Predict {
            ckpt,
            input,
            out,
            points,
            seed,
            arch,
        } => {
            let opts = PredictOptions {
                points,
                seed,
                arch: arch.map(|a| match a {
                    ArchArg::Upper => Arch::Upper,
                    ArchArg::Lower => Arch::Lower,
                }),
            };
            let pred = pipeline::predict_file(&ckpt, &input, &out, &opts)?;
            let in_mesh = pred.landmarks.iter().filter(|l| l.in_mesh).count();
            println!("wrote {} ({in_mesh} landmarks on the mesh)", out.display());
        }
        Command::Evaluate { pred, gt, out, radius } => {
            let report = pipeline::evaluate_dirs(&pred, &gt, &out, radius)?;
            print!("{}", report.to_table());
        }
        Command::Benchmark {
            ckpt,
            data,
            warmup,
            reps,
            points,
        } => {
            let opts = PredictOptions {
                points,
                ..PredictOptions::default()
            };
            let report = pipeline::benchmark(&ckpt, &data, warmup, reps, &opts)?;
            println!("{}", report.summary());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
