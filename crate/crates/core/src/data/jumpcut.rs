//! Jump-cut detection by comparing per-channel color histograms.

use serde::{Deserialize, Serialize};

use crate::image::{Image, CHANNELS};

pub const DEFAULT_HISTOGRAM_BINS: usize = 64;

/// Distance above which two frames are treated as belonging to different
/// shots. The distance ranges over `[0, 6]`. Measured on procedural textures:
/// 1-pixel pans stay below 0.25 at 32×32 and below 0.03 at 150×150, while
/// unrelated textures score above 1.7 and a black/white cut scores 6.
pub const DEFAULT_CUT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpCutDetector {
    pub bins: usize,
    pub threshold: f64,
}

impl Default for JumpCutDetector {
    fn default() -> Self {
        JumpCutDetector {
            bins: DEFAULT_HISTOGRAM_BINS,
            threshold: DEFAULT_CUT_THRESHOLD,
        }
    }
}

impl JumpCutDetector {
    /// Per-channel histograms with `bins` bins each, normalized by pixel count.
    pub fn histograms(&self, img: &Image) -> Vec<[f64; CHANNELS]> {
        let bins = self.bins.max(1);
        let mut h = vec![[0.0; CHANNELS]; bins];
        let scale = 1.0 / (img.height() * img.width()) as f64;
        for c in 0..CHANNELS {
            for &v in img.channel(c) {
                let b = ((v.clamp(0.0, 1.0) * bins as f32) as usize).min(bins - 1);
                h[b][c] += scale;
            }
        }
        h
    }

    /// Sum over channels of the L1 distance between normalized histograms.
    /// Frames may differ in size.
    pub fn distance(&self, a: &Image, b: &Image) -> f64 {
        let (ha, hb) = (self.histograms(a), self.histograms(b));
        ha.iter()
            .zip(&hb)
            .map(|(x, y)| (0..CHANNELS).map(|c| (x[c] - y[c]).abs()).sum::<f64>())
            .sum()
    }

    pub fn is_cut(&self, a: &Image, b: &Image) -> bool {
        self.distance(a, b) > self.threshold
    }
}

/// [`JumpCutDetector::is_cut`] with the default bins and threshold.
pub fn detect_jump_cut(a: &Image, b: &Image) -> bool {
    JumpCutDetector::default().is_cut(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extremes() {
        let black = Image::constant(8, 8, 0.0);
        let white = Image::constant(8, 8, 1.0);
        let d = JumpCutDetector::default();
        assert_eq!(d.distance(&black, &black), 0.0);
        assert!((d.distance(&black, &white) - 6.0).abs() < 1e-12);
        assert!(detect_jump_cut(&black, &white));
        assert!(!detect_jump_cut(&white, &white));
    }
}
