//! The epoch loop: shuffled mini-batches, per-epoch validation, checkpoints,
//! previews, resumption and fine-tuning.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AdaMaxConfig, OptimizerState, Trainer};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::{augment, center_crop, DatasetIndex, PatchRecord, Split, Triplet, TRAINING_CROP};
use crate::error::{Error, Result};
use crate::losses::{FeatureExtractor, LossConfig, DEFAULT_FEATURE_TAP};
use crate::network::{build_network, interpolate_frame, NetworkConfig};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const PREVIEW_DIR: &str = "previews";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: u64,
    /// Directory holding a dataset index.
    pub dataset: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub preview_count: usize,
    pub seed: u64,
    /// Random flips/rotations/temporal swap and random crops; when false
    /// training uses center crops.
    pub augment: bool,
    pub crop: usize,
    pub optimizer: AdaMaxConfig,
    pub vgg_weights: Option<PathBuf>,
    pub feature_tap: usize,
    /// Stop each epoch after this many steps.
    pub max_steps_per_epoch: Option<usize>,
    /// Start from the weights and optimizer state of this checkpoint (for
    /// example a chosen epoch of a run on another dataset).
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            batch_size: 16,
            learning_rate: 0.01,
            epochs: 50,
            dataset: PathBuf::from("dataset"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            preview_count: 10,
            seed: 0,
            augment: true,
            crop: TRAINING_CROP,
            optimizer: AdaMaxConfig::default(),
            vgg_weights: None,
            feature_tap: DEFAULT_FEATURE_TAP,
            max_steps_per_epoch: None,
            init_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.crop == 0 {
            return Err(Error::config("crop must be positive"));
        }
        Ok(())
    }

    fn extractor(&self, loss: &LossConfig) -> Result<Option<Arc<FeatureExtractor>>> {
        if !loss.kind.needs_extractor() {
            return Ok(None);
        }
        let path = self
            .vgg_weights
            .as_ref()
            .ok_or_else(|| Error::ExtractorUnavailable {
                path: PathBuf::new(),
                message: format!(
                    "loss {} needs VGG-19 weights but vgg_weights is not set",
                    loss.kind
                ),
            })?;
        Ok(Some(Arc::new(FeatureExtractor::load(
            path,
            self.feature_tap,
        )?)))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// `step`, `epoch` or `resume`.
    pub event: String,
    pub epoch: u64,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    /// Seconds since this process started training.
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoints: Vec<PathBuf>,
    /// Per-epoch records written in this invocation.
    pub epochs: Vec<LogRecord>,
    pub trainer: Trainer,
}

pub fn checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("epoch-{epoch:04}.ckpt"))
}

/// The checkpoint with the highest epoch number in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let epoch = path.file_name().and_then(|n| n.to_str()).and_then(|n| {
            n.strip_prefix("epoch-")?
                .strip_suffix(".ckpt")?
                .parse::<u64>()
                .ok()
        });
        if let Some(e) = epoch {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

fn sub_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the three words
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mini-batch order of `n` training records in `epoch`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(
        seed,
        epoch,
        u64::MAX,
    )));
    order
}

struct Run<'a> {
    config: &'a TrainConfig,
    index: DatasetIndex,
    train: Vec<PatchRecord>,
    validation: Vec<Triplet>,
    previews: Vec<Triplet>,
    log: fs::File,
    started: Instant,
}

impl<'a> Run<'a> {
    fn open(config: &'a TrainConfig) -> Result<Self> {
        config.validate()?;
        let index = DatasetIndex::load(&config.dataset)?;
        let train: Vec<PatchRecord> = index.split(Split::Train).cloned().collect();
        if train.is_empty() {
            return Err(Error::Dataset(format!(
                "{} has no training records",
                config.dataset.display()
            )));
        }
        let validation = index
            .split(Split::Validation)
            .collect::<Vec<_>>()
            .par_iter()
            .map(|r| center_crop(&index.load_patch(r)?, config.crop))
            .collect::<Result<Vec<_>>>()?;
        let previews = if validation.is_empty() {
            train
                .iter()
                .take(config.preview_count)
                .map(|r| center_crop(&index.load_patch(r)?, config.crop))
                .collect::<Result<Vec<_>>>()?
        } else {
            validation
                .iter()
                .take(config.preview_count)
                .cloned()
                .collect()
        };
        fs::create_dir_all(&config.checkpoint_dir)
            .map_err(|e| Error::io(&config.checkpoint_dir, e))?;
        let log_path = config.checkpoint_dir.join(LOG_FILE);
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        Ok(Run {
            config,
            index,
            train,
            validation,
            previews,
            log,
            started: Instant::now(),
        })
    }

    fn write_log(&mut self, record: &LogRecord) -> Result<()> {
        let mut line = serde_json::to_string(record).expect("serializable");
        line.push('\n');
        let path = self.config.checkpoint_dir.join(LOG_FILE);
        self.log
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    fn record(
        &self,
        event: &str,
        epoch: u64,
        step: u64,
        train_loss: Option<f64>,
        val_loss: Option<f64>,
    ) -> LogRecord {
        LogRecord {
            event: event.into(),
            epoch,
            step,
            train_loss,
            val_loss,
            wall_time: self.started.elapsed().as_secs_f64(),
        }
    }

    fn load_batch(&self, epoch: u64, positions: &[(usize, usize)]) -> Result<Vec<Triplet>> {
        positions
            .par_iter()
            .map(|&(pos, idx)| {
                let patch = self.index.load_patch(&self.train[idx])?;
                if self.config.augment {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(sub_seed(self.config.seed, epoch, pos as u64));
                    augment(&patch, &mut rng, self.config.crop)
                } else {
                    center_crop(&patch, self.config.crop)
                }
            })
            .collect()
    }

    fn write_previews(&self, trainer: &Trainer, epoch: u64) -> Result<()> {
        if self.previews.is_empty() {
            return Ok(());
        }
        let dir = self
            .config
            .checkpoint_dir
            .join(PREVIEW_DIR)
            .join(format!("epoch-{epoch:04}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, t) in self.previews.iter().enumerate() {
            interpolate_frame(&trainer.params, &t.first, &t.last)?
                .save(dir.join(format!("{i:02}.png")))?;
        }
        Ok(())
    }

    /// Train epochs `epoch + 1 ..= end`, checkpointing after each.
    fn epochs(
        &mut self,
        trainer: &mut Trainer,
        mut meta: CheckpointMeta,
        end: u64,
    ) -> Result<(Vec<PathBuf>, Vec<LogRecord>)> {
        let (mut checkpoints, mut records) = (Vec::new(), Vec::new());
        meta.dataset_id = Some(self.index.id().to_string());
        meta.loss = trainer.loss.label();
        meta.loss_config = Some(trainer.loss);
        meta.feature_tap = trainer.extractor().map(|e| e.tap());
        meta.seed = self.config.seed;
        while meta.epoch < end {
            let epoch = meta.epoch + 1;
            let order = epoch_order(self.config.seed, epoch, self.train.len());
            let positions: Vec<(usize, usize)> = order.into_iter().enumerate().collect();
            let mut losses = Vec::new();
            for batch in positions.chunks(self.config.batch_size) {
                if self
                    .config
                    .max_steps_per_epoch
                    .is_some_and(|m| losses.len() >= m)
                {
                    break;
                }
                let samples = self.load_batch(epoch, batch)?;
                let loss = trainer.step(&samples)?;
                losses.push(loss as f64);
                let rec = self.record(
                    "step",
                    epoch,
                    trainer.optimizer.step,
                    Some(loss as f64),
                    None,
                );
                self.write_log(&rec)?;
            }
            let train_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
            let val_loss = if self.validation.is_empty() {
                None
            } else {
                Some(trainer.mean_loss(&self.validation)? as f64)
            };
            meta.epoch = epoch;
            meta.train_loss = Some(train_loss);
            meta.val_loss = val_loss;
            let path = checkpoint_path(&self.config.checkpoint_dir, epoch);
            Checkpoint::new(
                trainer.params.clone(),
                Some(trainer.optimizer.clone()),
                meta.clone(),
            )
            .save(&path)?;
            self.write_previews(trainer, epoch)?;
            let rec = self.record(
                "epoch",
                epoch,
                trainer.optimizer.step,
                Some(train_loss),
                val_loss,
            );
            self.write_log(&rec)?;
            log::info!(
                "epoch {epoch}: train {train_loss:.5}, val {}, {}",
                val_loss.map_or("n/a".to_string(), |v| format!("{v:.5}")),
                path.display()
            );
            checkpoints.push(path);
            records.push(rec);
        }
        Ok((checkpoints, records))
    }
}

fn resume_from(
    path: &Path,
    config: &TrainConfig,
    loss: LossConfig,
    extractor: Option<Arc<FeatureExtractor>>,
) -> Result<(Trainer, CheckpointMeta)> {
    let ck = Checkpoint::load(path)?;
    if ck.params.config != config.network {
        return Err(Error::config(format!(
            "{} was trained with network {:?}, the configuration asks for {:?}",
            path.display(),
            ck.params.config,
            config.network
        )));
    }
    let optimizer = ck.optimizer.ok_or_else(|| Error::Checkpoint {
        path: path.to_path_buf(),
        message: "no optimizer state; cannot resume".into(),
    })?;
    let trainer = Trainer::with_state(ck.params, optimizer, loss, config.learning_rate, extractor)?;
    Ok((trainer, ck.meta))
}

fn run_start_epoch(meta: &CheckpointMeta) -> u64 {
    meta.run_start_epoch.unwrap_or(0)
}

/// Train from scratch (or from `init_checkpoint`) for `config.epochs` epochs.
/// With `resume`, continue from the latest checkpoint in `checkpoint_dir`.
pub fn train(config: &TrainConfig, resume: bool) -> Result<TrainOutcome> {
    let mut run = Run::open(config)?;
    let extractor = config.extractor(&config.loss)?;
    let latest = if resume {
        latest_checkpoint(&config.checkpoint_dir)?
    } else {
        None
    };
    let (mut trainer, meta) = if let Some(path) = latest {
        let (trainer, meta) = resume_from(&path, config, config.loss, extractor)?;
        log::info!("resuming from {} (epoch {})", path.display(), meta.epoch);
        let rec = run.record(
            "resume",
            meta.epoch,
            trainer.optimizer.step,
            meta.train_loss,
            meta.val_loss,
        );
        run.write_log(&rec)?;
        (trainer, meta)
    } else if let Some(init) = &config.init_checkpoint {
        let (trainer, parent) = resume_from(init, config, config.loss, extractor)?;
        let meta = CheckpointMeta {
            parent: Some(crate::checkpoint::params_id(&trainer.params)),
            run_start_epoch: Some(0),
            ..Default::default()
        };
        log::info!(
            "initialized from {} (epoch {})",
            init.display(),
            parent.epoch
        );
        (trainer, meta)
    } else {
        let params = build_network(&config.network, config.seed)?;
        let trainer = Trainer::new(
            params,
            config.loss,
            config.learning_rate,
            config.optimizer,
            extractor,
        )?;
        (trainer, CheckpointMeta::default())
    };
    let end = run_start_epoch(&meta) + config.epochs;
    let (checkpoints, epochs) = run.epochs(&mut trainer, meta, end)?;
    Ok(TrainOutcome {
        checkpoints,
        epochs,
        trainer,
    })
}

/// Continue optimizing the weights in `from` under `loss` for
/// `config.epochs` epochs with a fresh optimizer state. Checkpoints record
/// the source checkpoint's id as their parent. With `resume`, an interrupted
/// fine-tuning run in `checkpoint_dir` is continued instead.
pub fn fine_tune(
    from: &Path,
    loss: LossConfig,
    config: &TrainConfig,
    resume: bool,
) -> Result<TrainOutcome> {
    let mut run = Run::open(config)?;
    let extractor = config.extractor(&loss)?;
    let latest = if resume {
        latest_checkpoint(&config.checkpoint_dir)?
    } else {
        None
    };
    let (mut trainer, meta) = if let Some(path) = latest {
        let (trainer, meta) = resume_from(&path, config, loss, extractor)?;
        let rec = run.record(
            "resume",
            meta.epoch,
            trainer.optimizer.step,
            meta.train_loss,
            meta.val_loss,
        );
        run.write_log(&rec)?;
        (trainer, meta)
    } else {
        let ck = Checkpoint::load(from)?;
        let optimizer = OptimizerState::new(
            config.optimizer,
            ck.params.tensors().iter().map(|(_, t)| t.len()),
        );
        let meta = CheckpointMeta {
            epoch: ck.meta.epoch,
            parent: Some(ck.id()),
            run_start_epoch: Some(ck.meta.epoch),
            ..Default::default()
        };
        let trainer =
            Trainer::with_state(ck.params, optimizer, loss, config.learning_rate, extractor)?;
        (trainer, meta)
    };
    let end = run_start_epoch(&meta) + config.epochs;
    let (checkpoints, epochs) = run.epochs(&mut trainer, meta, end)?;
    Ok(TrainOutcome {
        checkpoints,
        epochs,
        trainer,
    })
}
