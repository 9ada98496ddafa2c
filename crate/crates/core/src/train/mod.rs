//! Optimization: the AdaMax optimizer, a single training step and the epoch
//! loop with checkpointing and resumption.

mod adamax;
mod session;

pub use adamax::{AdaMaxConfig, OptimizerState};
pub use session::{
    checkpoint_path, epoch_order, fine_tune, latest_checkpoint, train, LogRecord, TrainConfig,
    TrainOutcome, LOG_FILE, PREVIEW_DIR,
};

use std::sync::Arc;

use crate::data::Triplet;
use crate::error::{Error, Result};
use crate::kernelconv::{local_sepconv_backward, local_sepconv_forward};
use crate::losses::{FeatureExtractor, LossConfig};
use rayon::prelude::*;

use crate::network::{batch_gradients, predict_kernels, FramePair, Gradients, ModelParameters};

/// Loss and parameter gradients for one triplet. The synthesized frame is not
/// clamped here so that the gradient reaches saturated pixels.
pub fn sample_gradients(
    params: &ModelParameters,
    loss: &LossConfig,
    extractor: Option<&FeatureExtractor>,
    sample: &Triplet,
) -> Result<(f32, Gradients)> {
    let pair = FramePair::new(&sample.first, &sample.last)?;
    let (kernels, tape) = params.forward_train(&pair);
    let pred = local_sepconv_forward(&sample.first, &sample.last, &kernels)?;
    let (value, grad_pred) = loss.evaluate(&pred, &sample.middle, extractor)?;
    let grad_kernels = local_sepconv_backward(&grad_pred, &sample.first, &sample.last, &kernels)?;
    Ok((value, params.backward(tape, &grad_kernels)))
}

/// Parameters, optimizer state and objective.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: ModelParameters,
    pub optimizer: OptimizerState,
    pub loss: LossConfig,
    pub learning_rate: f64,
    extractor: Option<Arc<FeatureExtractor>>,
}

impl Trainer {
    pub fn new(
        params: ModelParameters,
        loss: LossConfig,
        learning_rate: f64,
        adamax: AdaMaxConfig,
        extractor: Option<Arc<FeatureExtractor>>,
    ) -> Result<Self> {
        let optimizer = OptimizerState::new(adamax, params.tensors().iter().map(|(_, t)| t.len()));
        Trainer::with_state(params, optimizer, loss, learning_rate, extractor)
    }

    /// Continue from an existing optimizer state (resumption).
    pub fn with_state(
        params: ModelParameters,
        optimizer: OptimizerState,
        loss: LossConfig,
        learning_rate: f64,
        extractor: Option<Arc<FeatureExtractor>>,
    ) -> Result<Self> {
        params.validate()?;
        loss.validate()?;
        optimizer.config.validate()?;
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if loss.kind.needs_extractor() && extractor.is_none() {
            return Err(Error::config(format!(
                "loss {} needs a feature extractor (set vgg_weights)",
                loss.kind
            )));
        }
        let sizes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
        if optimizer.sizes() != sizes {
            return Err(Error::dim(
                "optimizer state does not match the parameter layout",
            ));
        }
        Ok(Trainer {
            params,
            optimizer,
            loss,
            learning_rate,
            extractor,
        })
    }

    pub fn extractor(&self) -> Option<&FeatureExtractor> {
        self.extractor.as_deref()
    }

    /// One optimizer step on the mean loss of `batch`. Returns that mean
    /// (measured before the update). On a non-finite gradient the step is
    /// skipped and the offending tensor is named in the error.
    pub fn step(&mut self, batch: &[Triplet]) -> Result<f32> {
        if batch.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let (values, mut grads) = batch_gradients(&self.params, batch, |p, s| {
            sample_gradients(p, &self.loss, self.extractor.as_deref(), s)
        })?;
        grads.scale(1.0 / batch.len() as f32);
        let mean = values.iter().sum::<f32>() / values.len() as f32;
        let mut params = self.params.tensors_mut();
        self.optimizer
            .step(&mut params, &grads.tensors(), self.learning_rate)?;
        Ok(mean)
    }

    /// Mean loss over `samples` without updating anything.
    pub fn mean_loss(&self, samples: &[Triplet]) -> Result<f32> {
        if samples.is_empty() {
            return Err(Error::config("no samples"));
        }
        let values = samples
            .par_iter()
            .map(|s| {
                let pair = FramePair::new(&s.first, &s.last)?;
                let kernels = predict_kernels(&self.params, &pair)?;
                let pred = local_sepconv_forward(&s.first, &s.last, &kernels)?;
                Ok(self
                    .loss
                    .evaluate(&pred, &s.middle, self.extractor.as_deref())?
                    .0)
            })
            .collect::<Result<Vec<f32>>>()?;
        Ok(values.iter().sum::<f32>() / values.len() as f32)
    }
}
