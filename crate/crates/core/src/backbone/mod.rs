//! Pixel-space denoising backbone: configuration, forward noising process and
//! the cross-attention UNet.

mod unet;

pub use unet::{AcaFeatures, UNet};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Number of training timesteps `T`; timesteps are `1..=T`.
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Channel width per resolution stage; every stage after the first halves
    /// the spatial size.
    pub unet_widths: Vec<usize>,
    pub context_dim: usize,
    /// Spatial sizes whose stages carry cross-attention.
    pub cross_attention_resolutions: Vec<usize>,
    pub attention_heads: usize,
    pub norm_groups: usize,
    pub lora_rank: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 3,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            unet_widths: vec![64, 128, 256, 256],
            context_dim: 256,
            cross_attention_resolutions: vec![16, 8],
            attention_heads: 4,
            norm_groups: 16,
            lora_rank: 4,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        let stages = self.unet_widths.len();
        if stages == 0 {
            return Err(Error::Config("unet_widths is empty".into()));
        }
        if self.channels != 3 {
            return Err(Error::Config("only RGB (3-channel) images are supported".into()));
        }
        let factor = 1usize << (stages - 1);
        if self.image_size == 0 || self.image_size % factor != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by 2^{}",
                self.image_size,
                stages - 1
            )));
        }
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be positive".into()));
        }
        if !(0.0 < self.beta_start && self.beta_start < self.beta_end && self.beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta schedule must satisfy 0 < start < end < 1, got {} .. {}",
                self.beta_start, self.beta_end
            )));
        }
        for &w in &self.unet_widths {
            if w % self.norm_groups != 0 {
                return Err(Error::Config(format!("width {w} not divisible by {} norm groups", self.norm_groups)));
            }
            if w % self.attention_heads != 0 {
                return Err(Error::Config(format!("width {w} not divisible by {} heads", self.attention_heads)));
            }
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be at least 1".into()));
        }
        Ok(())
    }

    pub fn stage_resolutions(&self) -> Vec<usize> {
        (0..self.unet_widths.len()).map(|i| self.image_size >> i).collect()
    }

    /// Spatial size of the deepest encoder-side block.
    pub fn deepest_resolution(&self) -> usize {
        self.image_size >> (self.unet_widths.len() - 1)
    }

    /// Channel count at the input of the deepest encoder-side block.
    pub fn deepest_input_channels(&self) -> usize {
        let n = self.unet_widths.len();
        if n == 1 {
            self.unet_widths[0]
        } else {
            self.unet_widths[n - 2]
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let t = self.timesteps;
        let betas = (0..t)
            .map(|i| {
                if t == 1 {
                    self.beta_start
                } else {
                    self.beta_start + (self.beta_end - self.beta_start) * i as f64 / (t - 1) as f64
                }
            })
            .collect();
        NoiseSchedule::from_betas(betas)
    }
}

/// Per-timestep variances and their cumulative signal retention.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// `betas[i]` is the variance of timestep `i + 1`; must be strictly
    /// increasing inside `(0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("empty beta schedule".into()));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("betas must be strictly increasing".into()));
        }
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alphas_cumprod })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative `∏(1 - β)` up to and including `t` (1-based); `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.alphas_cumprod
            .get(t - 1)
            .copied()
            .ok_or_else(|| Error::Range(format!("timestep {t} outside 1..={}", self.timesteps())))
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::Range(format!("timestep {t} outside 1..={}", self.timesteps())));
        }
        Ok(())
    }

    /// Forward process for a batch `(B, C, H, W)` with one timestep per item.
    pub fn add_noise(&self, x0: &Tensor, t: &[usize], eps: &Tensor) -> Result<NoisyLatent> {
        if x0.dims() != eps.dims() {
            return Err(Error::Shape(format!("x0 {:?} vs eps {:?}", x0.dims(), eps.dims())));
        }
        let (b, _, _, _) = x0.dims4()?;
        if t.len() != b {
            return Err(Error::Shape(format!("{} timesteps for batch of {b}", t.len())));
        }
        for &ti in t {
            self.check_t(ti)?;
        }
        let lo = x0.flatten_all()?.min(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let hi = x0.flatten_all()?.max(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if lo < -1.0 - 1e-6 || hi > 1.0 + 1e-6 {
            return Err(Error::Range(format!("x0 values span [{lo}, {hi}], expected [-1, 1]")));
        }
        let abar: Vec<f64> = t.iter().map(|&ti| self.alphas_cumprod[ti - 1]).collect();
        let x_t = noise_with_alpha_bar(x0, &abar, eps)?;
        Ok(NoisyLatent { x_t, t: t.to_vec() })
    }
}

/// `sqrt(ā)·x0 + sqrt(1 − ā)·eps`, with one `ā` per batch item.
pub fn noise_with_alpha_bar(x0: &Tensor, alpha_bar: &[f64], eps: &Tensor) -> Result<Tensor> {
    let b = x0.dim(0)?;
    if alpha_bar.len() != b {
        return Err(Error::Shape(format!("{} alpha_bar values for batch of {b}", alpha_bar.len())));
    }
    let shape = [b, 1, 1, 1];
    let signal: Vec<f64> = alpha_bar.iter().map(|a| a.sqrt()).collect();
    let noise: Vec<f64> = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
    let signal = Tensor::from_vec(signal, &shape[..x0.rank()], &Device::Cpu)?.to_dtype(x0.dtype())?;
    let noise = Tensor::from_vec(noise, &shape[..x0.rank()], &Device::Cpu)?.to_dtype(x0.dtype())?;
    Ok((x0.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?)
}

/// Noised images `(B, C, H, W)` and their timesteps.
#[derive(Debug, Clone)]
pub struct NoisyLatent {
    pub x_t: Tensor,
    pub t: Vec<usize>,
}
