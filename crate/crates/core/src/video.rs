//! Frame-rate doubling of frame sequences.
//!
//! Output is `[f0, i(f0,f1), f1, i(f1,f2), …, f_{N-1}]`, i.e. `2N − 1`
//! frames. Where a jump cut separates two frames the earlier frame is
//! repeated instead of blending two unrelated shots.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::JumpCutDetector;
use crate::error::{Error, Result};
use crate::eval::Interpolator;
use crate::image::Image;

/// Frames at least this wide or tall trigger a quality warning: the kernel
/// covers too little of the motion at such resolutions.
pub const QUALITY_WARNING_SIZE: (usize, usize) = (1280, 720);

pub fn exceeds_quality_envelope(height: usize, width: usize) -> bool {
    width >= QUALITY_WARNING_SIZE.0 || height >= QUALITY_WARNING_SIZE.1
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DoublingReport {
    pub input_frames: usize,
    pub output_frames: Vec<PathBuf>,
    /// Indices `i` such that a cut lies between input frames `i` and `i + 1`.
    pub cuts: Vec<usize>,
    pub quality_warning: bool,
}

/// Midpoint for one pair, or `None` at a jump cut.
fn midpoint(
    a: &Image,
    b: &Image,
    interp: &dyn Interpolator,
    detector: &JumpCutDetector,
) -> Result<Option<Image>> {
    if detector.is_cut(a, b) {
        return Ok(None);
    }
    interp.interpolate(a, b).map(Some)
}

/// In-memory doubling.
pub fn double_frame_rate(
    frames: &[Image],
    interp: &dyn Interpolator,
    detector: &JumpCutDetector,
) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity((2 * frames.len()).saturating_sub(1));
    for (i, f) in frames.iter().enumerate() {
        if i > 0 {
            let prev = &frames[i - 1];
            prev.same_size(f)?;
            out.push(midpoint(prev, f, interp, detector)?.unwrap_or_else(|| prev.clone()));
        }
        out.push(f.clone());
    }
    Ok(out)
}

/// Double the frames in `inputs` (in order), writing `frame_000000.png`, …
/// into `out_dir`. Only two input frames are held in memory at a time.
pub fn double_frame_files(
    inputs: &[PathBuf],
    out_dir: &Path,
    interp: &dyn Interpolator,
    detector: &JumpCutDetector,
) -> Result<DoublingReport> {
    if inputs.is_empty() {
        return Err(Error::Dataset("no input frames".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut report = DoublingReport {
        input_frames: inputs.len(),
        output_frames: Vec::with_capacity(2 * inputs.len() - 1),
        cuts: Vec::new(),
        quality_warning: false,
    };
    let emit = |img: &Image, report: &mut DoublingReport| -> Result<()> {
        let path = out_dir.join(format!("frame_{:06}.png", report.output_frames.len()));
        img.save(&path)?;
        report.output_frames.push(path);
        Ok(())
    };

    let mut prev = Image::load(&inputs[0])?;
    let (h, w) = prev.size();
    if exceeds_quality_envelope(h, w) {
        log::warn!(
            "{w}x{h} input: quality degrades at {}x{} and above because motion outgrows the kernel",
            QUALITY_WARNING_SIZE.0,
            QUALITY_WARNING_SIZE.1
        );
        report.quality_warning = true;
    }
    emit(&prev, &mut report)?;
    for (i, path) in inputs.iter().enumerate().skip(1) {
        let next = Image::load(path)?;
        prev.same_size(&next)?;
        match midpoint(&prev, &next, interp, detector)? {
            Some(mid) => emit(&mid, &mut report)?,
            None => {
                log::info!(
                    "jump cut between frames {} and {i}; repeating frame {}",
                    i - 1,
                    i - 1
                );
                report.cuts.push(i - 1);
                emit(&prev, &mut report)?;
            }
        }
        emit(&next, &mut report)?;
        prev = next;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::LinearBaseline;
    use crate::synthetic::{translating_sequence, Texture};

    #[test]
    fn count_and_cut_fallback() {
        let mut frames = translating_sequence(&Texture::random(1), 48, 48, 5, (0.0, 1.0));
        frames[3] = Image::constant(48, 48, 0.95);
        let out = double_frame_rate(&frames, &LinearBaseline, &JumpCutDetector::default()).unwrap();
        assert_eq!(out.len(), 9);
        assert_eq!(out[5], frames[2]);
        assert_eq!(
            out[1],
            LinearBaseline.interpolate(&frames[0], &frames[1]).unwrap()
        );
    }

    #[test]
    fn envelope() {
        assert!(!exceeds_quality_envelope(540, 960));
        assert!(exceeds_quality_envelope(720, 1280));
        assert!(exceeds_quality_envelope(1080, 1920));
    }
}
