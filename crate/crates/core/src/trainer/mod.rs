//! Noise-prediction training: base pretraining, adapter training with style
//! conditioning and the content adapter, and fast residual finetuning.

mod data;
mod finetune;

pub use data::{Dataset, DatasetManifest, ManifestRecord};
pub use finetune::{fast_finetune, FinetuneOptions};

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aca::{augment_content, gate_aca};
use crate::checkpoint::{save_checkpoint, TrainMetadata};
use crate::error::{Error, Result};
use crate::image_io::sha256_hex;
use crate::model::{Model, ModelConfig, ParamGroup, Phase, Preset};
use crate::nn::Init;
use crate::params::Group;
use crate::style::{StyleEmbedding, StyleStats};
use crate::text::{Tokenizer, STYLE_TOKENS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Model size used when `model` is absent.
    pub preset: Preset,
    pub model: Option<ModelConfig>,
    pub batch_size: usize,
    pub lr_encoder_aca: f64,
    pub lr_explicit: f64,
    pub lr_pretrain: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Adapter-training steps.
    pub max_steps: u64,
    /// Base-stack steps before the freeze boundary; ignored with `init_checkpoint`.
    pub pretrain_steps: u64,
    pub seed: u64,
    pub cfg_dropout_probability: f64,
    /// Probability that a pretraining step carries nine zero style slots.
    pub pretrain_style_slot_probability: f64,
    /// Save a checkpoint every this many adapter steps (0 = only at the end).
    pub checkpoint_every: u64,
    /// Start from this checkpoint's base stack instead of pretraining.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            model: None,
            batch_size: 16,
            lr_encoder_aca: crate::model::LR_ENCODER_ACA,
            lr_explicit: crate::model::LR_EXPLICIT,
            lr_pretrain: crate::model::LR_PRETRAIN,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_steps: 1000,
            pretrain_steps: 1000,
            seed: 0,
            cfg_dropout_probability: 0.1,
            pretrain_style_slot_probability: 0.5,
            checkpoint_every: 0,
            init_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("train config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, lr) in [
            ("lr_encoder_aca", self.lr_encoder_aca),
            ("lr_explicit", self.lr_explicit),
            ("lr_pretrain", self.lr_pretrain),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        for (name, p) in [
            ("cfg_dropout_probability", self.cfg_dropout_probability),
            ("pretrain_style_slot_probability", self.pretrain_style_slot_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("invalid AdamW hyperparameters".into()));
        }
        self.model_config().validate()
    }

    /// Model configuration with the run seed as initializer seed.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone().unwrap_or_else(|| self.preset.config());
        m.init_seed = self.seed;
        m
    }

    pub fn config_hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }

    pub(crate) fn adamw(&self, group: &ParamGroup, lr: f64, weight_decay: f64) -> Result<AdamW> {
        Ok(AdamW::new(
            group.vars.clone(),
            ParamsAdamW {
                lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay,
            },
        )?)
    }
}

/// Where the style tokens of conditional items come from.
#[derive(Debug, Clone, Copy)]
pub enum StyleSource<'a> {
    /// Per-item statistics through the (possibly trainable) level networks.
    Stats(&'a [&'a StyleStats]),
    /// One fixed embedding shared by every item.
    Fixed(&'a StyleEmbedding),
    /// Nine zero tokens.
    Zero,
    /// No style slots.
    Absent,
}

/// Random draws of one step.
#[derive(Debug, Clone)]
pub struct StepPlan {
    pub t: Vec<usize>,
    /// `(B, 3, S, S)` unit Gaussian.
    pub eps: Tensor,
    /// Items trained on the unconditional context.
    pub uncond: Vec<bool>,
    pub augment_seeds: Vec<u64>,
    pub use_aca: bool,
}

impl StepPlan {
    pub fn draw(rng: &mut ChaCha8Rng, batch: usize, model: &Model, cfg_dropout: f64, use_aca: bool) -> Result<Self> {
        let total = model.schedule().timesteps();
        let s = model.image_size();
        let t = (0..batch).map(|_| rng.random_range(1..=total)).collect();
        let uncond = (0..batch).map(|_| rng.random::<f64>() < cfg_dropout).collect();
        let augment_seeds = (0..batch).map(|_| rng.random()).collect();
        let eps = Init::new(rng.random(), DType::F32).normal(&[batch, 3, s, s], 1.0)?;
        Ok(Self {
            t,
            eps,
            uncond,
            augment_seeds,
            use_aca,
        })
    }

    pub fn uncond_count(&self) -> usize {
        self.uncond.iter().filter(|u| **u).count()
    }
}

/// Per-step generator: stream `step` of a ChaCha8 keyed by the run seed.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn select(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), t.device())?;
    Ok(t.index_select(&ids, 0)?)
}

/// Mean squared noise-prediction error of one batch.
///
/// Conditional items see their caption (and style, per `style`); dropped
/// items see the empty prompt without style. The content adapter, when
/// enabled, sees a colour-augmented copy of each item's own clean image and
/// is gated per item by its timestep.
pub fn training_loss(model: &Model, images: &[Tensor], captions: &[&str], style: StyleSource, plan: &StepPlan) -> Result<Tensor> {
    let b = images.len();
    if captions.len() != b || plan.t.len() != b {
        return Err(Error::Shape(format!(
            "batch of {b} images, {} captions, {} timesteps",
            captions.len(),
            plan.t.len()
        )));
    }
    if let StyleSource::Stats(s) = style {
        if s.len() != b {
            return Err(Error::Shape(format!("{} style statistics for batch of {b}", s.len())));
        }
    }
    let x0 = Tensor::stack(images, 0)?.affine(2.0, -1.0)?;
    let noisy = model.schedule().add_noise(&x0, &plan.t, &plan.eps)?;
    let cond: Vec<usize> = (0..b).filter(|i| !plan.uncond[*i]).collect();
    let uncond: Vec<usize> = (0..b).filter(|i| plan.uncond[*i]).collect();
    let d = model.config().diffusion.context_dim;
    let fraction = model.config().aca.gate_fraction;
    let total_t = model.schedule().timesteps();
    let mut sse: Option<Tensor> = None;
    for (idx, conditional) in [(cond, true), (uncond, false)] {
        if idx.is_empty() {
            continue;
        }
        let n = idx.len();
        let context = if conditional {
            let prompts: Vec<&str> = idx.iter().map(|&i| captions[i]).collect();
            let tokens = match style {
                StyleSource::Stats(s) => {
                    let picked: Vec<&StyleStats> = idx.iter().map(|&i| s[i]).collect();
                    Some(model.style_encoder().encode_stats(&picked)?)
                }
                StyleSource::Fixed(e) => Some(e.tokens().unsqueeze(0)?.repeat((n, 1, 1))?),
                StyleSource::Zero => Some(Tensor::zeros((n, STYLE_TOKENS, d), DType::F32, &Device::Cpu)?),
                StyleSource::Absent => None,
            };
            model.encode_prompts(&prompts, tokens.as_ref())?
        } else {
            model.unconditional_context()?
        };
        let ts: Vec<usize> = idx.iter().map(|&i| plan.t[i]).collect();
        let aca = if plan.use_aca {
            let active = ts
                .iter()
                .map(|&t| gate_aca(t, total_t, fraction))
                .collect::<Result<Vec<_>>>()?;
            if active.iter().any(|a| *a) {
                let policy = &model.config().aca.augment;
                let aug = idx
                    .iter()
                    .map(|&i| augment_content(&images[i], policy, plan.augment_seeds[i]))
                    .collect::<Result<Vec<_>>>()?;
                let mut f = model.content_adapter().encode_content(&Tensor::stack(&aug, 0)?)?;
                f.active = active;
                Some(f)
            } else {
                None
            }
        } else {
            None
        };
        let x_t = select(&noisy.x_t, &idx)?;
        let eps = select(&plan.eps, &idx)?;
        let pred = model.unet().forward(&x_t, &ts, &context, aca.as_ref())?;
        let part = (pred - eps)?.sqr()?.sum_all()?;
        sse = Some(match sse {
            Some(s) => (s + part)?,
            None => part,
        });
    }
    let sse = sse.expect("non-empty batch");
    Ok((sse / plan.eps.elem_count() as f64)?)
}

fn check_finite(loss: &Tensor, step: u64, phase: &str, plan: &StepPlan) -> Result<f64> {
    let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!(
            "{phase} step {step}: loss {v} (timesteps {:?}, {} unconditional items)",
            plan.t,
            plan.uncond_count()
        )));
    }
    Ok(v)
}

/// Progress callback: `(phase, step, loss)`.
pub type Progress<'a> = &'a mut dyn FnMut(&str, u64, f64);

fn batch_indices(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// Trains the base UNet and text encoder; the style slots, when present,
/// carry zero tokens.
pub fn pretrain(model: &Model, data: &Dataset, cfg: &TrainConfig, progress: Progress) -> Result<Vec<f64>> {
    model.set_phase(Phase::Pretraining);
    let groups = model.trainable_parameters(Phase::Pretraining)?;
    let mut opt = cfg.adamw(&groups[0], cfg.lr_pretrain, cfg.weight_decay)?;
    let mut losses = Vec::with_capacity(cfg.pretrain_steps as usize);
    for step in 0..cfg.pretrain_steps {
        let mut rng = step_rng(cfg.seed ^ 0x7072_6574, step);
        let idx = batch_indices(&mut rng, data.len(), cfg.batch_size);
        let slots = rng.random::<f64>() < cfg.pretrain_style_slot_probability;
        let plan = StepPlan::draw(&mut rng, idx.len(), model, cfg.cfg_dropout_probability, false)?;
        let images: Vec<Tensor> = idx.iter().map(|&i| data.images[i].clone()).collect();
        let captions: Vec<&str> = idx.iter().map(|&i| data.captions[i].as_str()).collect();
        let style = if slots { StyleSource::Zero } else { StyleSource::Absent };
        let loss = training_loss(model, &images, &captions, style, &plan)?;
        let v = check_finite(&loss, step, "pretrain", &plan)?;
        opt.step(&loss.backward()?)?;
        losses.push(v);
        progress("pretrain", step, v);
    }
    model.set_phase(Phase::Inference);
    Ok(losses)
}

/// Outcome of one adapter-training step.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub loss: f64,
    pub uncond_items: usize,
    pub batch: usize,
}

/// Adapter training with two optimizer groups: style networks and content
/// adapter at `lr_encoder_aca`, low-rank factors and scales at `lr_explicit`.
pub struct AdapterTrainer<'m> {
    model: &'m Model,
    cfg: TrainConfig,
    opt_main: AdamW,
    opt_explicit: AdamW,
    step: u64,
}

impl<'m> AdapterTrainer<'m> {
    pub fn new(model: &'m Model, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let groups = model.trainable_parameters(Phase::AdapterTraining)?;
        Ok(Self {
            model,
            opt_main: cfg.adamw(&groups[0], cfg.lr_encoder_aca, cfg.weight_decay)?,
            opt_explicit: cfg.adamw(&groups[1], cfg.lr_explicit, cfg.weight_decay)?,
            cfg: cfg.clone(),
            step: 0,
        })
    }

    /// Learning rates of the two groups.
    pub fn learning_rates(&self) -> (f64, f64) {
        (self.opt_main.learning_rate(), self.opt_explicit.learning_rate())
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, data: &Dataset) -> Result<StepReport> {
        let model = self.model;
        model.set_phase(Phase::AdapterTraining);
        let mut rng = step_rng(self.cfg.seed, self.step);
        let idx = batch_indices(&mut rng, data.len(), self.cfg.batch_size);
        let plan = StepPlan::draw(&mut rng, idx.len(), model, self.cfg.cfg_dropout_probability, true)?;
        let images: Vec<Tensor> = idx.iter().map(|&i| data.images[i].clone()).collect();
        let captions: Vec<&str> = idx.iter().map(|&i| data.captions[i].as_str()).collect();
        let stats: Vec<&StyleStats> = idx.iter().map(|&i| &data.stats[i]).collect();
        let loss = training_loss(model, &images, &captions, StyleSource::Stats(&stats), &plan)?;
        let v = check_finite(&loss, self.step, "adapter", &plan)?;
        let grads = loss.backward()?;
        self.opt_main.step(&grads)?;
        self.opt_explicit.step(&grads)?;
        model.set_phase(Phase::Inference);
        self.step += 1;
        Ok(StepReport {
            loss: v,
            uncond_items: plan.uncond_count(),
            batch: idx.len(),
        })
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub meta: TrainMetadata,
    pub pretrain_losses: Vec<f64>,
    pub adapter_losses: Vec<f64>,
    pub checkpoint: PathBuf,
}

fn write_curve(path: &Path, losses: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    writeln!(f, "step,loss").map_err(|e| Error::io(path, e))?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(f, "{},{l}", i + 1).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

fn frozen_hashes(model: &Model) -> Result<Vec<String>> {
    [Group::Backbone, Group::TextEncoder, Group::FeatureNet]
        .iter()
        .map(|g| model.registry().group_hash(*g))
        .collect()
}

/// Full run: manifest → (pretraining) → adapter training → checkpoint in `out_dir`.
///
/// Writes `model.ckpt`, `adapter_loss.csv` and, when pretraining ran,
/// `pretrain_loss.csv`.
pub fn train(cfg: &TrainConfig, manifest: &DatasetManifest, out_dir: &Path, progress: Progress) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (model, mut meta) = match &cfg.init_checkpoint {
        Some(path) => crate::checkpoint::load_checkpoint(path)?,
        None => {
            let mcfg = cfg.model_config();
            let tok = Tokenizer::build(manifest.captions(), mcfg.text.max_text_tokens);
            (Model::new(mcfg, tok)?, TrainMetadata::default())
        }
    };
    let data = Dataset::load(manifest, &model)?;
    let mut pretrain_losses = Vec::new();
    if cfg.init_checkpoint.is_none() && cfg.pretrain_steps > 0 {
        pretrain_losses = pretrain(&model, &data, cfg, progress)?;
        write_curve(&out_dir.join("pretrain_loss.csv"), &pretrain_losses)?;
        meta.pretrain_steps = cfg.pretrain_steps;
    }
    let frozen = frozen_hashes(&model)?;
    meta.seed = cfg.seed;
    meta.config_hash = cfg.config_hash()?;
    let checkpoint = out_dir.join("model.ckpt");
    let start = meta.adapter_steps;
    let mut adapter_losses = Vec::with_capacity(cfg.max_steps as usize);
    {
        let mut trainer = AdapterTrainer::new(&model, cfg)?;
        for _ in 0..cfg.max_steps {
            let r = trainer.step(&data)?;
            adapter_losses.push(r.loss);
            progress("adapter", trainer.steps_done(), r.loss);
            if cfg.checkpoint_every > 0 && trainer.steps_done() % cfg.checkpoint_every == 0 {
                meta.adapter_steps = start + trainer.steps_done();
                save_checkpoint(&model, &meta, &checkpoint)?;
            }
        }
    }
    if frozen_hashes(&model)? != frozen {
        return Err(Error::Integrity("frozen parameters changed during adapter training".into()));
    }
    meta.adapter_steps = start + cfg.max_steps;
    write_curve(&out_dir.join("adapter_loss.csv"), &adapter_losses)?;
    save_checkpoint(&model, &meta, &checkpoint)?;
    Ok(TrainOutcome {
        model,
        meta,
        pretrain_losses,
        adapter_losses,
        checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_documented_values() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.lr_encoder_aca, 1e-4);
        assert_eq!(c.lr_explicit, 1e-7);
        assert_eq!((c.beta1, c.beta2, c.weight_decay), (0.9, 0.999, 0.01));
        assert_eq!(c.cfg_dropout_probability, 0.1);
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let c = TrainConfig {
            preset: Preset::Micro,
            max_steps: 7,
            ..TrainConfig::default()
        };
        let back = TrainConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(TrainConfig::from_toml("batch_size = 0").is_err());
        assert!(TrainConfig::from_toml("lr_explicit = -1.0").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
    }
}
