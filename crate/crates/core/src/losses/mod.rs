//! Training objectives: L1, SSIM, pretrained-feature distance and the
//! weighted L1 + feature combination.
//!
//! All losses take images normalized to `[0, 1]` and return the scalar value
//! together with its gradient with respect to the prediction.

mod feature;
mod ssim;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Scalar};

pub use feature::{FeatureExtractor, DEFAULT_FEATURE_TAP, VGG19_FEATURES};
pub use ssim::{gaussian_window, ssim, ssim_loss, ssim_with_grad, SSIM_C1, SSIM_C2, SSIM_SIGMA};

pub const DEFAULT_SSIM_WINDOW: usize = 11;
/// Feature-loss weights used in the fine-tuning experiments.
pub const NU_PRESETS: [f64; 2] = [5e-5, 1e-5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L1,
    Ssim,
    /// Pretrained-feature (perceptual) loss alone.
    #[serde(rename = "vgg")]
    Feature,
    /// `L1 + nu * feature`
    Combined,
}

impl LossKind {
    pub fn needs_extractor(self) -> bool {
        matches!(self, LossKind::Feature | LossKind::Combined)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::L1 => "l1",
            LossKind::Ssim => "ssim",
            LossKind::Feature => "vgg",
            LossKind::Combined => "combined",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(LossKind::L1),
            "ssim" => Ok(LossKind::Ssim),
            "vgg" | "feature" => Ok(LossKind::Feature),
            "combined" => Ok(LossKind::Combined),
            other => Err(Error::config(format!(
                "unknown loss {other:?} (expected l1, ssim, vgg or combined)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub nu: f64,
    pub ssim_window: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::L1,
            nu: NU_PRESETS[0],
            ssim_window: DEFAULT_SSIM_WINDOW,
        }
    }
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        LossConfig {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(Error::config(format!(
                "nu must be a non-negative number, got {}",
                self.nu
            )));
        }
        if self.ssim_window < 3 || self.ssim_window.is_multiple_of(2) {
            return Err(Error::config(format!(
                "ssim_window must be odd and >= 3, got {}",
                self.ssim_window
            )));
        }
        Ok(())
    }

    /// Short label used in logs and checkpoint metadata, e.g. `l1+1e-5*vgg`.
    pub fn label(&self) -> String {
        match self.kind {
            LossKind::Combined => format!("l1+{:e}*vgg", self.nu),
            k => k.to_string(),
        }
    }

    /// Value and gradient w.r.t. `pred` of the configured loss.
    pub fn evaluate(
        &self,
        pred: &Image<f32>,
        gt: &Image<f32>,
        extractor: Option<&FeatureExtractor>,
    ) -> Result<(f32, Array3<f32>)> {
        self.validate()?;
        let need = || {
            extractor.ok_or_else(|| {
                Error::config(format!(
                    "loss {} needs a feature extractor (set vgg_weights)",
                    self.kind
                ))
            })
        };
        match self.kind {
            LossKind::L1 => l1_loss_with_grad(pred, gt),
            LossKind::Ssim => {
                let (s, g) = ssim_with_grad(pred, gt, self.ssim_window)?;
                Ok((1.0 - s, -g))
            }
            LossKind::Feature => need()?.loss_with_grad(pred, gt),
            LossKind::Combined => combined_loss_with_grad(pred, gt, self.nu as f32, need()?),
        }
    }
}

/// Mean absolute difference over all pixels and channels.
pub fn l1_loss<T: Scalar>(pred: &Image<T>, gt: &Image<T>) -> Result<T> {
    pred.same_size(gt)?;
    let n = T::from(pred.data().len()).unwrap();
    let sum = Zip::from(pred.data())
        .and(gt.data())
        .fold(T::zero(), |s, &p, &g| s + (p - g).abs());
    Ok(sum / n)
}

pub fn l1_loss_with_grad<T: Scalar>(pred: &Image<T>, gt: &Image<T>) -> Result<(T, Array3<T>)> {
    let loss = l1_loss(pred, gt)?;
    let n = T::from(pred.data().len()).unwrap();
    let grad = Zip::from(pred.data()).and(gt.data()).map_collect(|&p, &g| {
        if p > g {
            T::one() / n
        } else if p < g {
            -T::one() / n
        } else {
            T::zero()
        }
    });
    Ok((loss, grad))
}

/// Mean squared difference of the extractor activations.
pub fn feature_loss(
    pred: &Image<f32>,
    gt: &Image<f32>,
    extractor: &FeatureExtractor,
) -> Result<f32> {
    extractor.loss(pred, gt)
}

/// `l1_loss + nu * feature_loss`
pub fn combined_loss(
    pred: &Image<f32>,
    gt: &Image<f32>,
    nu: f32,
    extractor: &FeatureExtractor,
) -> Result<f32> {
    let l1 = l1_loss(pred, gt)?;
    if nu == 0.0 {
        return Ok(l1);
    }
    Ok(l1 + nu * extractor.loss(pred, gt)?)
}

pub fn combined_loss_with_grad(
    pred: &Image<f32>,
    gt: &Image<f32>,
    nu: f32,
    extractor: &FeatureExtractor,
) -> Result<(f32, Array3<f32>)> {
    let (l1, mut g) = l1_loss_with_grad(pred, gt)?;
    if nu == 0.0 {
        return Ok((l1, g));
    }
    let (f, gf) = extractor.loss_with_grad(pred, gt)?;
    g.scaled_add(nu, &gf);
    Ok((l1 + nu * f, g))
}
