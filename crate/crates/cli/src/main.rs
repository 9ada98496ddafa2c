//! `sepconv`: dataset preparation, training, fine-tuning, evaluation and
//! frame-rate doubling from the command line.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage or configuration error,
//! 3 unreadable input, 4 checkpoint format version mismatch, 5 unwritable
//! output.

mod config;
mod failure;
mod ffmpeg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sepconv::checkpoint::Checkpoint;
use sepconv::data::dataset::list_sequences;
use sepconv::data::{build_dataset_default, JumpCutDetector};
use sepconv::eval::{evaluate, Interpolator, LinearBaseline, ModelInterpolator, Protocol};
use sepconv::losses::{LossConfig, LossKind};
use sepconv::train::{fine_tune, train};
use sepconv::video::double_frame_files;

use crate::config::JobConfig;
use crate::failure::Failure;

#[derive(Parser)]
#[command(
    name = "sepconv",
    version,
    about = "Video frame interpolation by adaptive separable convolution"
)]
struct Cli {
    /// Log level when RUST_LOG is unset.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the patch cache from a directory of frame sequences.
    Preprocess {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_patches: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a network on a patch cache.
    Train {
        /// Continue from the latest checkpoint in the checkpoint directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        epochs: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Continue training a checkpoint under another loss with fresh optimizer state.
    Finetune {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        loss: LossKind,
        #[arg(long)]
        nu: Option<f64>,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        epochs: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint (or the linear baseline) with PSNR and SSIM.
    Evaluate {
        #[arg(
            long,
            required_unless_present = "baseline",
            conflicts_with = "baseline"
        )]
        model: Option<PathBuf>,
        /// Evaluate the pixelwise average of the outer frames instead of a model.
        #[arg(long)]
        baseline: bool,
        /// Dataset cache, directory of triplet folders, frame sequences or a video file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "dataset")]
        protocol: Protocol,
        /// Report file (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Double the frame rate of a video file or a directory of frames.
    Interpolate {
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory of frames, or a video file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Frame rate of a frame-directory input when writing a video.
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
    },
}

fn load_config(cfg: &ConfigArgs) -> Result<JobConfig, Failure> {
    let job = JobConfig::load(cfg.config.as_deref(), &cfg.overrides)?;
    for line in job.render().lines() {
        log::info!("config: {line}");
    }
    Ok(job)
}

fn lib<T>(r: sepconv::Result<T>, outputs: &[&Path]) -> Result<T, Failure> {
    r.map_err(|e| Failure::from_error(e, outputs))
}

fn require_exists(path: &Path, what: &str) -> Result<(), Failure> {
    if !path.exists() {
        return Err(Failure::Input(format!(
            "{what} {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<ModelInterpolator, Failure> {
    require_exists(path, "checkpoint")?;
    let ck = lib(Checkpoint::load(path), &[])?;
    Ok(ModelInterpolator::new(ck.params))
}

fn temp_dir() -> Result<tempfile::TempDir, Failure> {
    tempfile::tempdir()
        .map_err(|e| Failure::Other(format!("cannot create a temporary directory: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Preprocess {
            src,
            out,
            max_patches,
            cfg,
        } => {
            let mut job = load_config(&cfg)?;
            if let Some(m) = max_patches {
                job.dataset.sampling.max_patches = m;
            }
            require_exists(&src, "source directory")?;
            let index = lib(build_dataset_default(&src, &out, &job.dataset), &[&out])?;
            log::info!(
                "wrote {} patch triplets from {} sequences to {}",
                index.records.len(),
                index.header.sequences.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            resume,
            epochs,
            cfg,
        } => {
            let mut job = load_config(&cfg)?;
            if let Some(e) = epochs {
                job.train.epochs = e;
            }
            let dir = job.train.checkpoint_dir.clone();
            let outcome = lib(train(&job.train, resume), &[&dir])?;
            log::info!(
                "wrote {} checkpoints to {}",
                outcome.checkpoints.len(),
                dir.display()
            );
            Ok(())
        }
        Command::Finetune {
            from,
            loss,
            nu,
            resume,
            epochs,
            cfg,
        } => {
            let mut job = load_config(&cfg)?;
            if let Some(e) = epochs {
                job.train.epochs = e;
            }
            let loss = LossConfig {
                kind: loss,
                nu: nu.unwrap_or(job.train.loss.nu),
                ssim_window: job.train.loss.ssim_window,
            };
            require_exists(&from, "checkpoint")?;
            let dir = job.train.checkpoint_dir.clone();
            let outcome = lib(fine_tune(&from, loss, &job.train, resume), &[&dir])?;
            log::info!(
                "wrote {} checkpoints to {}",
                outcome.checkpoints.len(),
                dir.display()
            );
            Ok(())
        }
        Command::Evaluate {
            model,
            baseline,
            data,
            protocol,
            out,
        } => {
            let interpolator: Box<dyn Interpolator> = match (model, baseline) {
                (_, true) => Box::new(LinearBaseline),
                (Some(path), false) => Box::new(load_model(&path)?),
                (None, false) => {
                    return Err(Failure::Usage(
                        "either --model or --baseline is required".into(),
                    ))
                }
            };
            require_exists(&data, "data")?;
            let frames;
            let data = if ffmpeg::is_video_path(&data) && data.is_file() {
                frames = temp_dir()?;
                ffmpeg::extract_frames(&data, frames.path())?;
                frames.path().to_path_buf()
            } else {
                data
            };
            let report = lib(evaluate(interpolator.as_ref(), &data, protocol), &[])?;
            lib(report.write(&out), &[&out])?;
            log::info!(
                "{} triplets: mean PSNR {}, mean SSIM {}; report {}",
                report.summary.count,
                report
                    .summary
                    .mean_psnr
                    .map_or("n/a".into(), |v| format!("{v:.2} dB")),
                report
                    .summary
                    .mean_ssim
                    .map_or("n/a".into(), |v| format!("{v:.4}")),
                out.display()
            );
            if report.failures.is_empty() {
                Ok(())
            } else {
                let items: Vec<String> = report
                    .failures
                    .iter()
                    .map(|f| format!("{}/{}", f.source, f.frame_index))
                    .collect();
                Err(Failure::Input(format!(
                    "{} triplets could not be scored: {}",
                    items.len(),
                    items.join(", ")
                )))
            }
        }
        Command::Interpolate {
            input,
            out,
            model,
            fps,
        } => {
            require_exists(&input, "input")?;
            let interpolator = load_model(&model)?;
            let video_in = ffmpeg::is_video_path(&input) && input.is_file();
            let video_out = ffmpeg::is_video_path(&out);
            let extracted;
            let (frames, fps) = if video_in {
                let fps = ffmpeg::probe_fps(&input)?;
                extracted = temp_dir()?;
                ffmpeg::extract_frames(&input, extracted.path())?;
                (lib(list_sequences(extracted.path()), &[])?, fps)
            } else {
                (lib(list_sequences(&input), &[])?, fps)
            };
            let frames = match frames.as_slice() {
                [(_, f)] => f.clone(),
                [] => {
                    return Err(Failure::Input(format!(
                        "no frames found in {}",
                        input.display()
                    )))
                }
                _ => {
                    return Err(Failure::Input(format!(
                        "{} holds several frame folders; pass one sequence",
                        input.display()
                    )))
                }
            };
            let staging;
            let frame_dir = if video_out {
                staging = temp_dir()?;
                staging.path().to_path_buf()
            } else {
                out.clone()
            };
            let report = lib(
                double_frame_files(
                    &frames,
                    &frame_dir,
                    &interpolator,
                    &JumpCutDetector::default(),
                ),
                &[&frame_dir],
            )?;
            if video_out {
                ffmpeg::encode_frames(
                    &frame_dir,
                    2.0 * fps,
                    video_in.then_some(input.as_path()),
                    &out,
                )?;
            }
            log::info!(
                "{} frames in, {} frames out ({} jump cuts) -> {}",
                report.input_frames,
                report.output_frames.len(),
                report.cuts.len(),
                out.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                failure::EXIT_USAGE as u8
            } else {
                0
            });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log_level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log::error!("{f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
