//! Flow-weighted patch sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::flow::{FlowEstimator, FlowField};
use super::Triplet;
use crate::error::{Error, Result};

pub const DEFAULT_PATCH_SIZE: usize = 150;
pub const DEFAULT_MAX_PATCHES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub patch_size: usize,
    pub max_patches: usize,
    /// Candidates drawn per accepted slot.
    pub candidate_factor: usize,
    /// Share of the acceptance mass spread uniformly over candidates, so that
    /// static regions keep a nonzero chance.
    pub floor: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            patch_size: DEFAULT_PATCH_SIZE,
            max_patches: DEFAULT_MAX_PATCHES,
            candidate_factor: 4,
            floor: 0.05,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.candidate_factor == 0 || !(0.0..=1.0).contains(&self.floor)
        {
            return Err(Error::config(format!(
                "invalid sampling parameters {self:?}"
            )));
        }
        Ok(())
    }
}

/// Three co-located crops of a frame triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTriplet {
    pub frames: Triplet,
    /// Top-left corner `(y, x)` in the source frames.
    pub origin: (usize, usize),
    /// Mean flow magnitude over the patch, in pixels.
    pub flow_score: f64,
}

/// Candidate origins with their flow scores and acceptance probabilities.
/// Exposed for inspection; [`sample_patches`] is the usual entry point.
pub fn candidate_probabilities(scores: &[f64], config: &SamplingConfig) -> Vec<f64> {
    let n = scores.len() as f64;
    let total: f64 = scores.iter().sum();
    scores
        .iter()
        .map(|&s| {
            let p = if total > 0.0 {
                (1.0 - config.floor) * s / total + config.floor / n
            } else {
                1.0 / n
            };
            (config.max_patches as f64 * p).min(1.0)
        })
        .collect()
}

/// Draw `candidate_factor · max_patches` uniform origins, score each by the
/// mean flow magnitude under it, and accept candidate `i` with probability
/// `min(1, max_patches · p_i)` where `p_i` mixes the normalized score with a
/// uniform floor. At most `max_patches` patches are returned, in draw order.
pub fn sample_patches_from_flow<R: Rng + ?Sized>(
    triplet: &Triplet,
    flow: &FlowField,
    config: &SamplingConfig,
    rng: &mut R,
) -> Result<Vec<PatchTriplet>> {
    config.validate()?;
    let (h, w) = triplet.size();
    let p = config.patch_size;
    if h < p || w < p {
        return Err(Error::dim(format!(
            "frames {h}x{w} are smaller than the {p}x{p} patch size"
        )));
    }
    if flow.size() != (h, w) {
        return Err(Error::dim("flow field size differs from the frames"));
    }
    if config.max_patches == 0 {
        return Ok(Vec::new());
    }
    let n = config.max_patches * config.candidate_factor;
    let origins: Vec<(usize, usize)> = (0..n)
        .map(|_| (rng.random_range(0..=h - p), rng.random_range(0..=w - p)))
        .collect();
    let scores = origins
        .iter()
        .map(|&(y, x)| flow.mean_magnitude(y, x, p, p))
        .collect::<Result<Vec<f64>>>()?;
    let accept = candidate_probabilities(&scores, config);

    let mut out = Vec::new();
    for ((&(y, x), &score), &a) in origins.iter().zip(&scores).zip(&accept) {
        if out.len() == config.max_patches {
            break;
        }
        if rng.random::<f64>() < a {
            let crop = |img: &crate::Image| img.crop(y, x, p, p);
            out.push(PatchTriplet {
                frames: Triplet::new(
                    crop(&triplet.first)?,
                    crop(&triplet.middle)?,
                    crop(&triplet.last)?,
                )?,
                origin: (y, x),
                flow_score: score,
            });
        }
    }
    Ok(out)
}

/// [`sample_patches_from_flow`] with the flow between the outer frames
/// estimated by `estimator`.
pub fn sample_patches<R: Rng + ?Sized>(
    triplet: &Triplet,
    config: &SamplingConfig,
    estimator: &dyn FlowEstimator,
    rng: &mut R,
) -> Result<Vec<PatchTriplet>> {
    let flow = estimator.estimate(&triplet.first, &triplet.last)?;
    sample_patches_from_flow(triplet, &flow, config, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probabilities_mix_floor_and_score() {
        let c = SamplingConfig {
            max_patches: 1,
            ..Default::default()
        };
        let p = candidate_probabilities(&[0.0, 1.0, 3.0, 0.0], &c);
        let expect = [0.0125, 0.95 * 0.25 + 0.0125, 0.95 * 0.75 + 0.0125, 0.0125];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(candidate_probabilities(&[0.0; 4], &c), vec![0.25; 4]);
    }
}
