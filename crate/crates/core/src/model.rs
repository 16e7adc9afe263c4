//! The assembled model: registry, tokenizer, text encoder, style encoder,
//! UNet and content adapter, plus training-phase control.

use std::collections::BTreeMap;
use std::sync::Arc;

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::aca::{AcaConfig, ContentAdapter};
use crate::adaptation::AdaptedProjection;
use crate::backbone::{AcaFeatures, DiffusionConfig, NoiseSchedule, NoisyLatent, UNet};
use crate::error::{Error, Result};
use crate::nn::{Builder, Init};
use crate::params::{Group, ParamRegistry};
use crate::residual::{FinetuneResidual, ResidualMeta};
use crate::style::{FeatureNetSpec, StyleConfig, StyleEmbedding, StyleEncoder};
use crate::text::{EncodedContext, TextConfig, TextEncoder, Tokenizer};

pub const LR_ENCODER_ACA: f64 = 1e-4;
pub const LR_EXPLICIT: f64 = 1e-7;
pub const LR_FINETUNE: f64 = 0.02;
pub const LR_PRETRAIN: f64 = 2e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub diffusion: DiffusionConfig,
    pub text: TextConfig,
    pub style: StyleConfig,
    pub aca: AcaConfig,
    /// Seed of every trainable initializer.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Smoke,
    Micro,
}

impl Preset {
    pub fn config(self) -> ModelConfig {
        match self {
            Preset::Desk => ModelConfig::desk(),
            Preset::Smoke => ModelConfig::smoke(),
            Preset::Micro => ModelConfig::micro(),
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Preset::Desk),
            "smoke" => Ok(Preset::Smoke),
            "micro" => Ok(Preset::Micro),
            other => Err(Error::Config(format!("unknown preset `{other}` (desk, smoke, micro)"))),
        }
    }
}

impl ModelConfig {
    /// 64x64 images, widths (64, 128, 256, 256), d = 256.
    pub fn desk() -> Self {
        Self {
            diffusion: DiffusionConfig::default(),
            text: TextConfig::default(),
            style: StyleConfig::default(),
            aca: AcaConfig::default(),
            init_seed: 0,
        }
    }

    /// Same image size and schedule as `desk`, narrow enough to train on a CPU.
    pub fn smoke() -> Self {
        Self {
            diffusion: DiffusionConfig {
                unet_widths: vec![16, 32, 64, 64],
                context_dim: 64,
                norm_groups: 8,
                ..DiffusionConfig::default()
            },
            text: TextConfig {
                max_text_tokens: 16,
                layers: 2,
                heads: 4,
            },
            style: StyleConfig {
                input_size: 128,
                feature_net: FeatureNetSpec::RandomVgg {
                    seed: 0x5eed,
                    widths: [64, 128, 128],
                },
                mlp_hidden: 128,
            },
            aca: AcaConfig {
                widths: vec![8, 16, 32, 32],
                ..AcaConfig::default()
            },
            init_seed: 0,
        }
    }

    /// 16x16 images and a two-stage UNet, for unit tests.
    pub fn micro() -> Self {
        Self {
            diffusion: DiffusionConfig {
                image_size: 16,
                unet_widths: vec![8, 16],
                context_dim: 16,
                cross_attention_resolutions: vec![8],
                attention_heads: 2,
                norm_groups: 4,
                lora_rank: 2,
                ..DiffusionConfig::default()
            },
            text: TextConfig {
                max_text_tokens: 12,
                layers: 1,
                heads: 2,
            },
            style: StyleConfig {
                input_size: 32,
                feature_net: FeatureNetSpec::RandomVgg {
                    seed: 0x5eed,
                    widths: [8, 16, 16],
                },
                mlp_hidden: 16,
            },
            aca: AcaConfig {
                widths: vec![4, 8],
                ..AcaConfig::default()
            },
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.diffusion.validate()?;
        self.aca.augment.validate()?;
        if self.diffusion.context_dim % self.text.heads != 0 {
            return Err(Error::Config(format!(
                "context_dim {} not divisible by {} text heads",
                self.diffusion.context_dim, self.text.heads
            )));
        }
        if !(0.0..=1.0).contains(&self.aca.gate_fraction) {
            return Err(Error::Config(format!("aca gate_fraction {} outside [0, 1]", self.aca.gate_fraction)));
        }
        Ok(())
    }
}

/// Which groups take part in gradient flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Inference,
    Pretraining,
    AdapterTraining,
    Finetuning,
}

impl Phase {
    pub fn live_groups(self) -> &'static [Group] {
        match self {
            Phase::Inference => &[],
            Phase::Pretraining => &[Group::Backbone, Group::TextEncoder],
            Phase::AdapterTraining => &[Group::StyleEncoder, Group::Aca, Group::Explicit],
            Phase::Finetuning => &[Group::Residual],
        }
    }
}

/// One optimizer group.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub label: &'static str,
    pub groups: Vec<Group>,
    pub lr: f64,
    pub vars: Vec<Var>,
}

impl ParamGroup {
    pub fn parameter_count(&self) -> usize {
        self.vars.iter().map(|v| v.elem_count()).sum()
    }
}

#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    registry: Arc<ParamRegistry>,
    tokenizer: Tokenizer,
    text: TextEncoder,
    style: StyleEncoder,
    unet: UNet,
    aca: ContentAdapter,
    schedule: NoiseSchedule,
}

impl Model {
    pub fn new(config: ModelConfig, tokenizer: Tokenizer) -> Result<Self> {
        config.validate()?;
        if tokenizer.max_tokens() != config.text.max_text_tokens {
            return Err(Error::Config(format!(
                "tokenizer truncates at {} tokens, text encoder expects {}",
                tokenizer.max_tokens(),
                config.text.max_text_tokens
            )));
        }
        let registry = ParamRegistry::new();
        let mut init = Init::new(config.init_seed, DType::F32);
        let d = config.diffusion.context_dim;
        let text = TextEncoder::new(
            &mut Builder::new(&registry, &mut init, Group::TextEncoder),
            &config.text,
            tokenizer.vocab_size(),
            d,
        )?;
        let style = StyleEncoder::new(&mut Builder::new(&registry, &mut init, Group::StyleEncoder), &config.style, d)?;
        let unet = UNet::new(&mut Builder::new(&registry, &mut init, Group::Backbone), &config.diffusion)?;
        let aca = ContentAdapter::new(
            &mut Builder::new(&registry, &mut init, Group::Aca),
            &config.aca,
            &config.diffusion,
        )?;
        let schedule = config.diffusion.schedule()?;
        registry.set_live(&[]);
        Ok(Self {
            config,
            registry,
            tokenizer,
            text,
            style,
            unet,
            aca,
            schedule,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn registry(&self) -> &Arc<ParamRegistry> {
        &self.registry
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn style_encoder(&self) -> &StyleEncoder {
        &self.style
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn content_adapter(&self) -> &ContentAdapter {
        &self.aca
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn image_size(&self) -> usize {
        self.config.diffusion.image_size
    }

    pub fn set_phase(&self, phase: Phase) {
        self.registry.set_live(phase.live_groups());
    }

    pub fn adapted_projections(&self) -> Vec<&AdaptedProjection> {
        self.unet.adapted_projections()
    }

    /// Optimizer groups for a training phase with the default learning rates.
    pub fn trainable_parameters(&self, phase: Phase) -> Result<Vec<ParamGroup>> {
        let group = |label, groups: Vec<Group>, lr| ParamGroup {
            label,
            vars: groups.iter().flat_map(|g| self.registry.vars(*g)).collect(),
            groups,
            lr,
        };
        match phase {
            Phase::Inference => Ok(Vec::new()),
            Phase::Pretraining => Ok(vec![group("base", vec![Group::Backbone, Group::TextEncoder], LR_PRETRAIN)]),
            Phase::AdapterTraining => Ok(vec![
                group("encoder_aca", vec![Group::StyleEncoder, Group::Aca], LR_ENCODER_ACA),
                group("explicit", vec![Group::Explicit], LR_EXPLICIT),
            ]),
            Phase::Finetuning => {
                if self.adapted_projections().iter().any(|p| p.delta_h().is_none()) {
                    return Err(Error::State("finetune residuals have not been allocated".into()));
                }
                Ok(vec![group("residual", vec![Group::Residual], LR_FINETUNE)])
            }
        }
    }

    /// Sets the runtime multiplier of every learnable scale.
    pub fn scale_alpha(&mut self, factor: f64) -> Result<()> {
        if !(factor >= 0.0) || !factor.is_finite() {
            return Err(Error::Argument(format!("alpha scale must be a finite non-negative number, got {factor}")));
        }
        for p in self.unet.adapted_projections_mut() {
            p.set_alpha_runtime_scale(factor)?;
        }
        Ok(())
    }

    pub fn alpha_scale(&self) -> f64 {
        self.adapted_projections().first().map(|p| p.alpha_runtime_scale()).unwrap_or(1.0)
    }

    /// Zero-valued residual on every adapted projection.
    pub fn allocate_residuals(&mut self) -> Result<()> {
        let registry = self.registry.clone();
        for p in self.unet.adapted_projections_mut() {
            p.allocate_residual(&registry)?;
        }
        Ok(())
    }

    pub fn has_residuals(&self) -> bool {
        self.adapted_projections().iter().any(|p| p.delta_h().is_some())
    }

    /// Loads a sidecar onto the projections; keys must match exactly.
    pub fn attach_residual(&mut self, residual: &FinetuneResidual) -> Result<()> {
        let paths: Vec<String> = self.adapted_projections().iter().map(|p| p.path().to_string()).collect();
        let missing: Vec<&String> = paths.iter().filter(|p| !residual.vectors.contains_key(*p)).collect();
        let unknown: Vec<&String> = residual.vectors.keys().filter(|k| !paths.contains(k)).collect();
        if !missing.is_empty() || !unknown.is_empty() {
            return Err(Error::Key(format!(
                "sidecar does not match the model: missing {missing:?}, unknown {unknown:?}"
            )));
        }
        for p in self.adapted_projections() {
            let v = &residual.vectors[p.path()];
            if v.dims() != [p.d_out()] {
                return Err(Error::Shape(format!("{}: residual {:?}, expected [{}]", p.path(), v.dims(), p.d_out())));
            }
        }
        let registry = self.registry.clone();
        for p in self.unet.adapted_projections_mut() {
            let v = residual.vectors[p.path()].clone();
            p.set_residual(&registry, &v)?;
        }
        Ok(())
    }

    pub fn detach_residual(&mut self) {
        for p in self.unet.adapted_projections_mut() {
            p.clear_residual();
        }
    }

    /// Current residual values as a sidecar.
    pub fn export_residual(&self, meta: ResidualMeta) -> Result<FinetuneResidual> {
        let mut vectors = BTreeMap::new();
        for p in self.adapted_projections() {
            let h = p
                .delta_h()
                .ok_or_else(|| Error::State(format!("{} carries no residual", p.path())))?;
            vectors.insert(p.path().to_string(), h.var().as_tensor().copy()?);
        }
        Ok(FinetuneResidual { vectors, meta })
    }

    /// Context for a batch of prompts, all padded to the tokenizer length.
    /// `style` is `(B, 9, d)` or absent.
    pub fn encode_prompts(&self, prompts: &[&str], style: Option<&Tensor>) -> Result<EncodedContext> {
        let tokens: Vec<_> = prompts.iter().map(|p| self.tokenizer.tokenize_padded(p)).collect();
        let text = self.text.embed_batch(&tokens, style.is_some())?;
        self.text.encode(style, &text)
    }

    pub fn context(&self, prompt: &str, style: Option<&StyleEmbedding>) -> Result<EncodedContext> {
        match style {
            Some(s) => self.encode_prompts(&[prompt], Some(&s.tokens().unsqueeze(0)?)),
            None => self.encode_prompts(&[prompt], None),
        }
    }

    /// Empty prompt without style tokens.
    pub fn unconditional_context(&self) -> Result<EncodedContext> {
        self.encode_prompts(&[""], None)
    }

    pub fn encode_style(&self, image: &Tensor) -> Result<StyleEmbedding> {
        self.style.encode_style(image)
    }

    pub fn predict_noise(&self, x_t: &NoisyLatent, context: &EncodedContext, aca: Option<&AcaFeatures>) -> Result<Tensor> {
        self.unet.predict_noise(x_t, context, aca)
    }

    /// Parameter count of a set of groups.
    pub fn parameter_count(&self, groups: &[Group]) -> usize {
        groups.iter().map(|g| self.registry.count(*g)).sum()
    }
}
