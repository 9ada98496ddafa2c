//! Flat `key = value` configuration files.
//!
//! ```text
//! version = 1
//! # comments and blank lines are ignored
//! kernel_size = 15
//! encoder_channels = 8,16,32,64,128
//! ```
//!
//! Every key must be known; `--set key=value` overrides are applied after the
//! file in command-line order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sepconv::data::DatasetConfig;
use sepconv::losses::LossKind;
use sepconv::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{origin}: {message}")]
    Invalid { origin: String, message: String },
}

/// Settings for every subcommand; each one reads the fields it needs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct JobConfig {
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| format!("{key} = {value:?}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("{key} = {value:?}: expected true or false")),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn list(key: &str, value: &str) -> Result<Vec<usize>, String> {
    value
        .split(',')
        .map(|v| parse::<usize>(key, v.trim()))
        .collect()
}

impl JobConfig {
    /// Set one key. Keys are documented in the README.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let t = &mut self.train;
        let d = &mut self.dataset;
        match key {
            "version" => {
                let v: u32 = parse(key, value)?;
                if v != CONFIG_VERSION {
                    return Err(format!(
                        "config version {v} is not supported (expected {CONFIG_VERSION})"
                    ));
                }
            }
            "encoder_channels" => t.network.encoder_channels = list(key, value)?,
            "kernel_size" => t.network.kernel_size = parse(key, value)?,
            "loss" => t.loss.kind = LossKind::from_str(value).map_err(|e| e.to_string())?,
            "nu" => t.loss.nu = parse(key, value)?,
            "ssim_window" => t.loss.ssim_window = parse(key, value)?,
            "vgg_weights" => t.vgg_weights = optional_path(value),
            "feature_tap" => t.feature_tap = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "dataset" => t.dataset = PathBuf::from(value),
            "checkpoint_dir" => t.checkpoint_dir = PathBuf::from(value),
            "preview_count" => t.preview_count = parse(key, value)?,
            "seed" => {
                t.seed = parse(key, value)?;
                d.seed = t.seed;
            }
            "augment" => t.augment = parse_bool(key, value)?,
            "crop" => t.crop = parse(key, value)?,
            "max_steps_per_epoch" => {
                t.max_steps_per_epoch = match value {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "init_checkpoint" => t.init_checkpoint = optional_path(value),
            "beta1" => t.optimizer.beta1 = parse(key, value)?,
            "beta2" => t.optimizer.beta2 = parse(key, value)?,
            "delta" => t.optimizer.delta = parse(key, value)?,
            "patch_size" => d.sampling.patch_size = parse(key, value)?,
            "max_patches" => d.sampling.max_patches = parse(key, value)?,
            "candidate_factor" => d.sampling.candidate_factor = parse(key, value)?,
            "sampling_floor" => d.sampling.floor = parse(key, value)?,
            "histogram_bins" => d.jump_cut.bins = parse(key, value)?,
            "cut_threshold" => d.jump_cut.threshold = parse(key, value)?,
            "flow_block" => d.flow.block = parse(key, value)?,
            "flow_radius" => d.flow.radius = parse(key, value)?,
            "flow_levels" => d.flow.levels = parse(key, value)?,
            "validation_fraction" => d.validation_fraction = parse(key, value)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Apply `key = value` lines; `origin` names the source in errors.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        let mut saw_version = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let invalid = |message: String| ConfigError::Invalid {
                origin: format!("{origin}:{}", i + 1),
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("expected key = value, got {line:?}")))?;
            let k = k.trim();
            saw_version |= k == "version";
            self.set(k, v.trim()).map_err(invalid)?;
        }
        if !saw_version {
            return Err(ConfigError::Invalid {
                origin: origin.to_string(),
                message: format!("missing `version = {CONFIG_VERSION}`"),
            });
        }
        Ok(())
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut cfg = JobConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
                path: path.to_path_buf(),
                source,
            })?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        for o in overrides {
            let invalid = |message: String| ConfigError::Invalid {
                origin: format!("--set {o}"),
                message,
            };
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| invalid("expected key=value".into()))?;
            cfg.set(k.trim(), v.trim()).map_err(invalid)?;
        }
        Ok(cfg)
    }

    /// The effective settings in file syntax.
    pub fn render(&self) -> String {
        let t = &self.train;
        let d = &self.dataset;
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or("none".to_string(), |p| p.display().to_string())
        };
        let channels: Vec<String> = t
            .network
            .encoder_channels
            .iter()
            .map(|c| c.to_string())
            .collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        kv("version", CONFIG_VERSION.to_string());
        kv("encoder_channels", channels.join(","));
        kv("kernel_size", t.network.kernel_size.to_string());
        kv("loss", t.loss.kind.to_string());
        kv("nu", t.loss.nu.to_string());
        kv("ssim_window", t.loss.ssim_window.to_string());
        kv("vgg_weights", path(&t.vgg_weights));
        kv("feature_tap", t.feature_tap.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("epochs", t.epochs.to_string());
        kv("dataset", t.dataset.display().to_string());
        kv("checkpoint_dir", t.checkpoint_dir.display().to_string());
        kv("preview_count", t.preview_count.to_string());
        kv("seed", t.seed.to_string());
        kv("augment", t.augment.to_string());
        kv("crop", t.crop.to_string());
        kv(
            "max_steps_per_epoch",
            t.max_steps_per_epoch
                .map_or("none".to_string(), |m| m.to_string()),
        );
        kv("init_checkpoint", path(&t.init_checkpoint));
        kv("beta1", t.optimizer.beta1.to_string());
        kv("beta2", t.optimizer.beta2.to_string());
        kv("delta", t.optimizer.delta.to_string());
        kv("patch_size", d.sampling.patch_size.to_string());
        kv("max_patches", d.sampling.max_patches.to_string());
        kv("candidate_factor", d.sampling.candidate_factor.to_string());
        kv("sampling_floor", d.sampling.floor.to_string());
        kv("histogram_bins", d.jump_cut.bins.to_string());
        kv("cut_threshold", d.jump_cut.threshold.to_string());
        kv("flow_block", d.flow.block.to_string());
        kv("flow_radius", d.flow.radius.to_string());
        kv("flow_levels", d.flow.levels.to_string());
        kv("validation_fraction", d.validation_fraction.to_string());
        s
    }
}
