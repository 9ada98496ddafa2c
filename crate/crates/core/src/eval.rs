//! Quantitative evaluation: PSNR and SSIM against ground truth for any
//! [`Interpolator`], over a cached dataset, a directory of triplets, or a
//! frame sequence sampled every 30 frames.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::params_id;
use crate::data::dataset::list_sequences;
use crate::data::{DatasetIndex, Split, Triplet};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{ssim, DEFAULT_SSIM_WINDOW};
use crate::network::{interpolate_frame, ModelParameters};

pub const REPORT_FORMAT: &str = "sepconv-eval";
pub const REPORT_VERSION: &str = "1.0.0";
pub const VIDEO_STRIDE: usize = 30;

/// Peak signal-to-noise ratio in dB on the 8-bit scale: images in `[0, 1]`
/// are multiplied by 255 and `10·log10(255² / MSE)` is returned, or
/// `f64::INFINITY` when the images are identical.
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    pred.same_size(gt)?;
    let n = pred.data().len() as f64;
    let sse: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| {
            let d = 255.0 * (a as f64 - b as f64);
            d * d
        })
        .sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / (sse / n)).log10())
}

/// Pixelwise mean of the two frames.
pub fn linear_baseline(frame1: &Image, frame2: &Image) -> Result<Image> {
    frame1.same_size(frame2)?;
    Image::new((frame1.data() + frame2.data()) * 0.5)
}

pub trait Interpolator: Sync {
    /// Identifies the model in reports.
    fn name(&self) -> String;
    fn interpolate(&self, frame1: &Image, frame2: &Image) -> Result<Image>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LinearBaseline;

impl Interpolator for LinearBaseline {
    fn name(&self) -> String {
        "linear".into()
    }

    fn interpolate(&self, frame1: &Image, frame2: &Image) -> Result<Image> {
        linear_baseline(frame1, frame2)
    }
}

/// The trained network as an [`Interpolator`].
#[derive(Debug, Clone)]
pub struct ModelInterpolator {
    pub params: ModelParameters,
    id: String,
}

impl ModelInterpolator {
    pub fn new(params: ModelParameters) -> Self {
        let id = params_id(&params);
        ModelInterpolator { params, id }
    }
}

impl Interpolator for ModelInterpolator {
    fn name(&self) -> String {
        format!("sepconv:{}", &self.id[..16])
    }

    fn interpolate(&self, frame1: &Image, frame2: &Image) -> Result<Image> {
        interpolate_frame(&self.params, frame1, frame2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Every validation triplet of a dataset index, or every triplet folder
    /// of a directory.
    Dataset,
    /// Triplets `(f, f+1, f+2)` for `f = 0, 30, 60, …` of each frame sequence.
    Video30,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dataset" => Ok(Protocol::Dataset),
            "video30" => Ok(Protocol::Video30),
            other => Err(Error::config(format!(
                "unknown protocol {other:?} (expected dataset or video30)"
            ))),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::Dataset => "dataset",
            Protocol::Video30 => "video30",
        })
    }
}

mod psnr_token {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum V {
            N(f64),
            S(String),
        }
        match V::deserialize(d)? {
            V::N(n) => Ok(n),
            V::S(s) if s == "inf" => Ok(f64::INFINITY),
            V::S(s) => Err(serde::de::Error::custom(format!("bad psnr token {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub source: String,
    pub frame_index: usize,
    /// dB; serialized as the string `"inf"` for identical images.
    #[serde(with = "psnr_token")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFailure {
    pub source: String,
    pub frame_index: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    /// Mean over records with finite PSNR.
    pub mean_psnr: Option<f64>,
    /// Records excluded from `mean_psnr` because their PSNR is infinite.
    pub infinite_psnr: usize,
    pub mean_ssim: Option<f64>,
    pub failed: usize,
}

impl EvalSummary {
    pub fn from_records(records: &[EvalRecord], failed: usize) -> Self {
        let finite: Vec<f64> = records
            .iter()
            .map(|r| r.psnr)
            .filter(|p| p.is_finite())
            .collect();
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let ssims: Vec<f64> = records.iter().map(|r| r.ssim).collect();
        EvalSummary {
            count: records.len(),
            mean_psnr: mean(&finite),
            infinite_psnr: records.len() - finite.len(),
            mean_ssim: mean(&ssims),
            failed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub protocol: Protocol,
    /// Dataset or frame directory the report was computed on.
    pub data: String,
    pub records: Vec<EvalRecord>,
    pub failures: Vec<EvalFailure>,
    pub summary: EvalSummary,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Line {
    Header {
        format: String,
        version: String,
        model: String,
        protocol: Protocol,
        data: String,
    },
    Record(EvalRecord),
    Failure(EvalFailure),
    Summary(EvalSummary),
}

impl EvalReport {
    /// Header line, one line per record and failure, then the summary.
    pub fn to_jsonl(&self) -> String {
        let mut lines = vec![Line::Header {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION.into(),
            model: self.model.clone(),
            protocol: self.protocol,
            data: self.data.clone(),
        }];
        lines.extend(self.records.iter().cloned().map(Line::Record));
        lines.extend(self.failures.iter().cloned().map(Line::Failure));
        lines.push(Line::Summary(self.summary.clone()));
        lines
            .iter()
            .map(|l| serde_json::to_string(l).expect("serializable") + "\n")
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let bad = |line: usize, message: String| Error::Record {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut header = None;
        let (mut records, mut failures, mut summary) = (Vec::new(), Vec::new(), None);
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| bad(i + 1, e.to_string()))?;
            match serde_json::from_str::<Line>(&line).map_err(|e| bad(i + 1, e.to_string()))? {
                Line::Header {
                    format,
                    version,
                    model,
                    protocol,
                    data,
                } => {
                    if format != REPORT_FORMAT
                        || version.split('.').next() != REPORT_VERSION.split('.').next()
                    {
                        return Err(bad(i + 1, format!("unsupported report {format} {version}")));
                    }
                    header = Some((model, protocol, data));
                }
                Line::Record(r) => records.push(r),
                Line::Failure(f) => failures.push(f),
                Line::Summary(s) => summary = Some(s),
            }
        }
        let (model, protocol, data) = header.ok_or_else(|| bad(1, "missing header".into()))?;
        let summary = summary.ok_or_else(|| bad(0, "missing summary".into()))?;
        Ok(EvalReport {
            model,
            protocol,
            data,
            records,
            failures,
            summary,
        })
    }

    /// True when the summary equals the one recomputed from the records.
    pub fn is_consistent(&self) -> bool {
        self.summary == EvalSummary::from_records(&self.records, self.failures.len())
    }
}

/// One triplet to score.
#[derive(Debug, Clone)]
pub enum EvalItem {
    Files {
        source: String,
        frame_index: usize,
        paths: [PathBuf; 3],
    },
    Cached {
        index_root: PathBuf,
        record: crate::data::PatchRecord,
    },
}

impl EvalItem {
    fn key(&self) -> (String, usize) {
        match self {
            EvalItem::Files {
                source,
                frame_index,
                ..
            } => (source.clone(), *frame_index),
            EvalItem::Cached { record, .. } => (record.source.clone(), record.frame_index),
        }
    }
}

/// Items for `protocol` under `data`.
///
/// `Dataset`: a directory with a dataset index yields its validation split
/// (all records when there is none); otherwise every subdirectory holding
/// exactly three frames is a triplet. `Video30`: every frame sequence under
/// `data` (see [`list_sequences`]) yields triplets starting every 30 frames.
pub fn collect_items(data: &Path, protocol: Protocol) -> Result<Vec<EvalItem>> {
    match protocol {
        Protocol::Dataset if data.join(crate::data::dataset::INDEX_FILE).exists() => {
            let index = DatasetIndex::load(data)?;
            let mut records: Vec<_> = index.split(Split::Validation).cloned().collect();
            if records.is_empty() {
                log::warn!(
                    "{} has no validation split; evaluating every record",
                    data.display()
                );
                records = index.records.clone();
            }
            Ok(records
                .into_iter()
                .map(|record| EvalItem::Cached {
                    index_root: data.to_path_buf(),
                    record,
                })
                .collect())
        }
        Protocol::Dataset => {
            let mut items = Vec::new();
            for (name, frames) in list_sequences(data)? {
                if frames.len() == 3 {
                    items.push(EvalItem::Files {
                        source: name,
                        frame_index: 0,
                        paths: [frames[0].clone(), frames[1].clone(), frames[2].clone()],
                    });
                } else {
                    log::warn!(
                        "skipping {name}: {} frames, a triplet folder needs 3",
                        frames.len()
                    );
                }
            }
            Ok(items)
        }
        Protocol::Video30 => {
            let mut items = Vec::new();
            for (name, frames) in list_sequences(data)? {
                for f in (0..frames.len().saturating_sub(2)).step_by(VIDEO_STRIDE) {
                    items.push(EvalItem::Files {
                        source: name.clone(),
                        frame_index: f,
                        paths: [
                            frames[f].clone(),
                            frames[f + 1].clone(),
                            frames[f + 2].clone(),
                        ],
                    });
                }
            }
            Ok(items)
        }
    }
}

fn load_item(item: &EvalItem) -> Result<Triplet> {
    match item {
        EvalItem::Files { paths, .. } => Triplet::new(
            Image::load(&paths[0])?,
            Image::load(&paths[1])?,
            Image::load(&paths[2])?,
        ),
        EvalItem::Cached { index_root, record } => {
            let path = index_root.join(&record.blob);
            let img = image::open(&path).map_err(|e| Error::ImageDecode {
                path,
                message: e.to_string(),
            })?;
            crate::data::dataset::decode_blob(&img.to_rgb8())
        }
    }
}

/// Score one triplet: the prediction is quantized to 8 bits, as a written
/// frame would be.
pub fn score_triplet(interpolator: &dyn Interpolator, t: &Triplet) -> Result<(f64, f64)> {
    let pred = interpolator.interpolate(&t.first, &t.last)?.quantized();
    Ok((
        psnr(&pred, &t.middle)?,
        ssim(&pred, &t.middle, DEFAULT_SSIM_WINDOW)? as f64,
    ))
}

pub fn evaluate_items(
    interpolator: &dyn Interpolator,
    items: &[EvalItem],
    protocol: Protocol,
    data: &str,
) -> EvalReport {
    let results: Vec<_> = items
        .par_iter()
        .map(|item| load_item(item).and_then(|t| score_triplet(interpolator, &t)))
        .collect();
    let (mut records, mut failures) = (Vec::new(), Vec::new());
    for (item, r) in items.iter().zip(results) {
        let (source, frame_index) = item.key();
        match r {
            Ok((psnr, ssim)) => records.push(EvalRecord {
                source,
                frame_index,
                psnr,
                ssim,
            }),
            Err(e) => {
                log::warn!("excluding {source}/{frame_index}: {e}");
                failures.push(EvalFailure {
                    source,
                    frame_index,
                    message: e.to_string(),
                })
            }
        }
    }
    let summary = EvalSummary::from_records(&records, failures.len());
    EvalReport {
        model: interpolator.name(),
        protocol,
        data: data.to_string(),
        records,
        failures,
        summary,
    }
}

/// Evaluate `interpolator` on `data` under `protocol`.
pub fn evaluate(
    interpolator: &dyn Interpolator,
    data: &Path,
    protocol: Protocol,
) -> Result<EvalReport> {
    let items = collect_items(data, protocol)?;
    if items.is_empty() {
        return Err(Error::Dataset(format!(
            "no {protocol} triplets found under {}",
            data.display()
        )));
    }
    Ok(evaluate_items(
        interpolator,
        &items,
        protocol,
        &data.display().to_string(),
    ))
}
