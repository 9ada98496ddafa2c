//! On-disk patch cache.
//!
//! ```text
//! <out>/index.jsonl          header line, then one record per patch triplet
//! <out>/blobs/<seq>/<frame>_<k>.png
//! ```
//!
//! Each blob stores the three patches of a triplet side by side (first,
//! middle, last) as an 8-bit PNG, which is lossless for 8-bit sources. The
//! header carries the format version, the builder configuration and its hash,
//! and per-sequence counts. The index is written to a temporary file and
//! renamed into place, so readers never see a partial index.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::flow::{BlockMatching, FlowEstimator};
use super::jumpcut::JumpCutDetector;
use super::sampling::{sample_patches, PatchTriplet, SamplingConfig};
use super::Triplet;
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::image::Image;

pub const INDEX_FILE: &str = "index.jsonl";
pub const INDEX_FORMAT: &str = "sepconv-dataset";
pub const INDEX_VERSION: &str = "1.0.0";
const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "ppm"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub sampling: SamplingConfig,
    pub jump_cut: JumpCutDetector,
    pub flow: BlockMatching,
    /// Share of sequences held out for validation.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            sampling: SamplingConfig::default(),
            jump_cut: JumpCutDetector::default(),
            flow: BlockMatching::default(),
            validation_fraction: 0.05,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config(format!(
                "validation_fraction must be in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("serializable"),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    /// Blob path relative to the dataset root.
    pub blob: String,
    pub origin: [usize; 2],
    pub flow_score: f64,
    pub source: String,
    /// Index of the first frame of the triplet within its sequence.
    pub frame_index: usize,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceSummary {
    pub name: String,
    pub frames: usize,
    pub triplets: usize,
    pub jump_cuts: usize,
    pub unreadable_frames: usize,
    /// Triplets skipped for other reasons (frames too small, size changes).
    pub skipped: usize,
    pub patches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexHeader {
    pub format: String,
    pub version: String,
    pub config_hash: String,
    pub config: DatasetConfig,
    pub sequences: Vec<SequenceSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub header: IndexHeader,
    pub records: Vec<PatchRecord>,
    id: String,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    v.sort();
    Ok(v)
}

/// Frame sequences under `source`: each subdirectory holding images is one
/// sequence; images directly inside `source` form a sequence named after it.
pub fn list_sequences(source: &Path) -> Result<Vec<(String, Vec<PathBuf>)>> {
    let entries = sorted_entries(source)?;
    let mut out = Vec::new();
    let direct: Vec<PathBuf> = entries
        .iter()
        .filter(|p| p.is_file() && is_image(p))
        .cloned()
        .collect();
    if !direct.is_empty() {
        let name = source
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("root")
            .to_string();
        out.push((name, direct));
    }
    for dir in entries.iter().filter(|p| p.is_dir()) {
        let frames: Vec<PathBuf> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        if !frames.is_empty() {
            let name = dir
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("seq")
                .to_string();
            out.push((name, frames));
        }
    }
    Ok(out)
}

fn triplet_seed(seed: u64, sequence: &str, index: usize) -> u64 {
    let d = Sha256::digest(format!("{seed}/{sequence}/{index}"));
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Encode the three patches side by side.
pub fn encode_blob(t: &Triplet) -> image::RgbImage {
    let (h, w) = t.size();
    let mut out = image::RgbImage::new(3 * w as u32, h as u32);
    for (k, f) in t.frames().iter().enumerate() {
        image::imageops::replace(&mut out, &f.to_rgb8(), (k * w) as i64, 0);
    }
    out
}

pub fn decode_blob(img: &image::RgbImage) -> Result<Triplet> {
    let (w3, h) = img.dimensions();
    if w3 % 3 != 0 || w3 == 0 {
        return Err(Error::Dataset(format!(
            "blob width {w3} is not a multiple of 3"
        )));
    }
    let full = Image::from_rgb8(img);
    let w = (w3 / 3) as usize;
    let h = h as usize;
    Triplet::new(
        full.crop(0, 0, h, w)?,
        full.crop(0, w, h, w)?,
        full.crop(0, 2 * w, h, w)?,
    )
}

enum Outcome {
    Patches(Vec<PatchRecord>),
    Cut,
    Unreadable,
    Skipped,
}

fn process_triplet(
    name: &str,
    frames: &[PathBuf],
    t: usize,
    out: &Path,
    config: &DatasetConfig,
    estimator: &dyn FlowEstimator,
) -> Result<Outcome> {
    let mut loaded = Vec::with_capacity(3);
    for p in &frames[t..t + 3] {
        match Image::load(p) {
            Ok(img) => loaded.push(img),
            Err(e) => {
                log::warn!("skipping triplet {name}/{t}: {e}");
                return Ok(Outcome::Unreadable);
            }
        }
    }
    let last = loaded.pop().expect("3 frames");
    let middle = loaded.pop().expect("3 frames");
    let first = loaded.pop().expect("3 frames");
    let triplet = match Triplet::new(first, middle, last) {
        Ok(t) => t,
        Err(e) => {
            log::warn!("skipping triplet {name}/{t}: {e}");
            return Ok(Outcome::Skipped);
        }
    };
    if config.jump_cut.is_cut(&triplet.first, &triplet.middle)
        || config.jump_cut.is_cut(&triplet.middle, &triplet.last)
    {
        log::debug!("jump cut in {name} at frame {t}");
        return Ok(Outcome::Cut);
    }
    let (h, w) = triplet.size();
    let p = config.sampling.patch_size;
    if h < p || w < p {
        log::warn!("skipping triplet {name}/{t}: frames {h}x{w} are smaller than {p}x{p}");
        return Ok(Outcome::Skipped);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(triplet_seed(config.seed, name, t));
    let patches =
        sample_patches(&triplet, &config.sampling, estimator, &mut rng).map_err(|e| match e {
            Error::Flow { message, .. } => Error::Flow {
                context: format!("{name} frame {t}"),
                message,
            },
            e => e,
        })?;
    let dir = out.join("blobs").join(name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut records = Vec::with_capacity(patches.len());
    for (
        k,
        PatchTriplet {
            frames,
            origin,
            flow_score,
        },
    ) in patches.iter().enumerate()
    {
        let rel = format!("blobs/{name}/{t:06}_{k:02}.png");
        let path = out.join(&rel);
        encode_blob(frames)
            .save(&path)
            .map_err(|e| Error::ImageEncode {
                path: path.clone(),
                message: e.to_string(),
            })?;
        records.push(PatchRecord {
            blob: rel,
            origin: [origin.0, origin.1],
            flow_score: *flow_score,
            source: name.to_string(),
            frame_index: t,
            split: Split::Train,
        });
    }
    Ok(Outcome::Patches(records))
}

/// Build the patch cache for every sequence under `source` into `out`.
pub fn build_dataset(
    source: &Path,
    out: &Path,
    config: &DatasetConfig,
    estimator: &dyn FlowEstimator,
) -> Result<DatasetIndex> {
    config.validate()?;
    let sequences = list_sequences(source)?;
    if sequences.is_empty() {
        return Err(Error::Dataset(format!(
            "no image sequences under {}",
            source.display()
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut summaries = Vec::new();
    let mut records = Vec::new();
    for (name, frames) in &sequences {
        let mut summary = SequenceSummary {
            name: name.clone(),
            frames: frames.len(),
            ..Default::default()
        };
        let n = frames.len().saturating_sub(2);
        let outcomes = (0..n)
            .into_par_iter()
            .map(|t| process_triplet(name, frames, t, out, config, estimator))
            .collect::<Result<Vec<_>>>()?;
        for o in outcomes {
            match o {
                Outcome::Patches(r) => {
                    summary.triplets += 1;
                    summary.patches += r.len();
                    records.extend(r);
                }
                Outcome::Cut => summary.jump_cuts += 1,
                Outcome::Unreadable => summary.unreadable_frames += 1,
                Outcome::Skipped => summary.skipped += 1,
            }
        }
        log::info!(
            "{name}: {} frames, {} triplets, {} cuts, {} patches",
            summary.frames,
            summary.triplets,
            summary.jump_cuts,
            summary.patches
        );
        summaries.push(summary);
    }
    if records.is_empty() {
        return Err(Error::Dataset(format!(
            "no patch triplets could be extracted from {}",
            source.display()
        )));
    }

    let mut productive: Vec<&str> = summaries
        .iter()
        .filter(|s| s.patches > 0)
        .map(|s| s.name.as_str())
        .collect();
    let n_val = if productive.len() >= 2 {
        ((config.validation_fraction * productive.len() as f64).round() as usize)
            .clamp(1, productive.len() - 1)
    } else {
        0
    };
    productive.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let validation: Vec<String> = productive[..n_val].iter().map(|s| s.to_string()).collect();
    for r in &mut records {
        if validation.contains(&r.source) {
            r.split = Split::Validation;
        }
    }

    let header = IndexHeader {
        format: INDEX_FORMAT.into(),
        version: INDEX_VERSION.into(),
        config_hash: config.hash(),
        config: *config,
        sequences: summaries,
    };
    let mut text = serde_json::to_string(&header).expect("serializable");
    text.push('\n');
    for r in &records {
        text.push_str(&serde_json::to_string(r).expect("serializable"));
        text.push('\n');
    }
    write_atomic(&out.join(INDEX_FILE), text.as_bytes())?;
    DatasetIndex::load(out)
}

impl DatasetIndex {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(INDEX_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let id = hex::encode(Sha256::digest(&bytes));
        let mut lines = BufReader::new(bytes.as_slice()).lines();
        let record_err = |line: usize, message: String| Error::Record {
            path: path.clone(),
            line,
            message,
        };
        let first = lines
            .next()
            .ok_or_else(|| record_err(1, "empty index".into()))?
            .map_err(|e| record_err(1, e.to_string()))?;
        let header: IndexHeader =
            serde_json::from_str(&first).map_err(|e| record_err(1, e.to_string()))?;
        let major = |v: &str| v.split('.').next().unwrap_or("").to_string();
        if header.format != INDEX_FORMAT || major(&header.version) != major(INDEX_VERSION) {
            return Err(record_err(
                1,
                format!(
                    "unsupported index {} {} (expected {INDEX_FORMAT} {INDEX_VERSION})",
                    header.format, header.version
                ),
            ));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| record_err(i + 2, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            records
                .push(serde_json::from_str(&line).map_err(|e| record_err(i + 2, e.to_string()))?);
        }
        Ok(DatasetIndex {
            root,
            header,
            records,
            id,
        })
    }

    /// SHA-256 of the index file.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &PatchRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn load_patch(&self, record: &PatchRecord) -> Result<Triplet> {
        let path = self.root.join(&record.blob);
        let img = image::open(&path).map_err(|e| Error::ImageDecode {
            path: path.clone(),
            message: e.to_string(),
        })?;
        decode_blob(&img.to_rgb8())
    }

    /// Check that every record points at a decodable blob of the configured
    /// patch size. Returns the number of records checked.
    pub fn verify(&self) -> Result<usize> {
        let p = self.header.config.sampling.patch_size;
        self.records.par_iter().try_for_each(|r| {
            let t = self.load_patch(r)?;
            if t.size() != (p, p) {
                return Err(Error::Dataset(format!(
                    "blob {} holds {:?} patches, expected {p}x{p}",
                    r.blob,
                    t.size()
                )));
            }
            Ok(())
        })?;
        Ok(self.records.len())
    }
}

/// Build with the bundled block-matching estimator from `config.flow`.
pub fn build_dataset_default(
    source: &Path,
    out: &Path,
    config: &DatasetConfig,
) -> Result<DatasetIndex> {
    let estimator: BlockMatching = config.flow;
    build_dataset(source, out, config, &estimator)
}
