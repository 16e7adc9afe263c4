use candle_core::Tensor;
use candle_nn::Optimizer;
use serde::{Deserialize, Serialize};

use super::{step_rng, training_loss, StepPlan, StyleSource, TrainConfig};
use crate::error::{Error, Result};
use crate::image_io::{image_hash, resize_shorter_center_crop};
use crate::model::{Model, Phase, LR_FINETUNE};
use crate::residual::{FinetuneResidual, ResidualMeta};
use crate::style::average_style_embeddings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneOptions {
    pub steps: usize,
    pub lr: f64,
    /// References are cycled to fill each batch.
    pub batch_size: usize,
    pub seed: u64,
    /// Prompt paired with the references.
    pub caption: String,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            steps: 25,
            lr: LR_FINETUNE,
            batch_size: 4,
            seed: 0,
            caption: String::new(),
        }
    }
}

/// Fits one residual vector per adapted projection to the references, with
/// every other parameter frozen. The model is left without residuals.
pub fn fast_finetune(model: &mut Model, references: &[Tensor], opts: &FinetuneOptions) -> Result<FinetuneResidual> {
    if references.is_empty() {
        return Err(Error::Argument("finetuning needs at least one style reference".into()));
    }
    if opts.steps == 0 || opts.batch_size == 0 || !(opts.lr > 0.0) {
        return Err(Error::Argument("steps, batch_size and lr must be positive".into()));
    }
    let embeddings = references
        .iter()
        .map(|r| model.encode_style(r))
        .collect::<Result<Vec<_>>>()?;
    let style = average_style_embeddings(&embeddings)?;
    let size = model.image_size();
    let images = references
        .iter()
        .map(|r| resize_shorter_center_crop(r, size))
        .collect::<Result<Vec<_>>>()?;
    let hashes = references.iter().map(image_hash).collect::<Result<Vec<_>>>()?;

    model.detach_residual();
    model.allocate_residuals()?;
    model.set_phase(Phase::Finetuning);
    let groups = model.trainable_parameters(Phase::Finetuning)?;
    let adam = TrainConfig::default();
    let mut opt = adam.adamw(&groups[0], opts.lr, 0.0)?;
    let mut done = 0;
    let result = (|| {
        for step in 0..opts.steps {
            let mut rng = step_rng(opts.seed ^ 0x6669_6e65, step as u64);
            let batch: Vec<Tensor> = (0..opts.batch_size)
                .map(|i| images[(step * opts.batch_size + i) % images.len()].clone())
                .collect();
            let captions = vec![opts.caption.as_str(); batch.len()];
            let plan = StepPlan::draw(&mut rng, batch.len(), model, 0.0, true)?;
            let loss = training_loss(model, &batch, &captions, StyleSource::Fixed(&style), &plan)?;
            let v = loss.to_scalar::<f32>()?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("finetune step {step}: loss {v}")));
            }
            opt.step(&loss.backward()?)?;
            done += 1;
        }
        model.export_residual(ResidualMeta {
            style_hashes: hashes,
            steps: done,
            lr: opts.lr,
        })
    })();
    model.set_phase(Phase::Inference);
    model.detach_residual();
    result
}
