//! Train-only auxiliary content adapter.
//!
//! A colour-augmented copy of the training image is encoded into a coarse
//! feature map at the deepest encoder resolution and added to that block's
//! input during the highest-noise fraction of timesteps. Sampling never
//! constructs these features.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{AcaFeatures, DiffusionConfig};
use crate::error::{Error, Result};
use crate::image_io::check_rgb;
use crate::nn::{silu, Builder, Conv2d};

/// Random colour augmentation applied to the adapter input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub inversion_probability: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            inversion_probability: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            inversion_probability: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.inversion_probability) {
            return Err(Error::Config(format!(
                "inversion_probability {} outside [0, 1]",
                self.inversion_probability
            )));
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} jitter range must be non-negative, got {v}")));
            }
        }
        if self.hue > 0.5 {
            return Err(Error::Config(format!("hue jitter {} exceeds 0.5", self.hue)));
        }
        Ok(())
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn gray(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Inversion with probability `inversion_probability`, then brightness,
/// contrast, saturation and hue jitter drawn from the policy ranges. Output is
/// clamped to `[0, 1]` and fully determined by `seed`.
pub fn augment_content(image: &Tensor, policy: &AugmentPolicy, seed: u64) -> Result<Tensor> {
    let (h, w) = check_rgb(image)?;
    let n = h * w;
    let mut px = image.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let invert = rng.random::<f64>() < policy.inversion_probability;
    let mut factor = |range: f64| {
        let u: f64 = rng.random();
        if range > 0.0 {
            Some((1.0 - range + 2.0 * range * u) as f32)
        } else {
            None
        }
    };
    let brightness = factor(policy.brightness);
    let contrast = factor(policy.contrast);
    let saturation = factor(policy.saturation);
    let hue_u: f64 = rng.random();
    let hue = (policy.hue > 0.0).then(|| (policy.hue * (2.0 * hue_u - 1.0)) as f32);

    if invert {
        px.iter_mut().for_each(|v| *v = 1.0 - *v);
    }
    if let Some(f) = brightness {
        px.iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
    }
    if let Some(f) = contrast {
        let mean = (0..n).map(|i| gray(px[i], px[n + i], px[2 * n + i])).sum::<f32>() / n as f32;
        px.iter_mut().for_each(|v| *v = ((*v - mean) * f + mean).clamp(0.0, 1.0));
    }
    if let Some(f) = saturation {
        for i in 0..n {
            let g = gray(px[i], px[n + i], px[2 * n + i]);
            for c in 0..3 {
                let v = &mut px[c * n + i];
                *v = ((*v - g) * f + g).clamp(0.0, 1.0);
            }
        }
    }
    if let Some(shift) = hue {
        for i in 0..n {
            let (hh, s, v) = rgb_to_hsv(px[i], px[n + i], px[2 * n + i]);
            let (r, g, b) = hsv_to_rgb(hh + shift, s, v);
            px[i] = r.clamp(0.0, 1.0);
            px[n + i] = g.clamp(0.0, 1.0);
            px[2 * n + i] = b.clamp(0.0, 1.0);
        }
    }
    Ok(Tensor::from_vec(px, (3, h, w), &Device::Cpu)?)
}

/// Whether the content adapter is active at timestep `t` of `total`: true iff
/// `t >= (1 - fraction) * total`.
pub fn gate_aca(t: usize, total: usize, fraction: f64) -> Result<bool> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Argument(format!("gate fraction {fraction} outside [0, 1]")));
    }
    if t == 0 || t > total {
        return Err(Error::Range(format!("timestep {t} outside 1..={total}")));
    }
    // Tolerance absorbs representation error in (1 - fraction) * total.
    let threshold = (1.0 - fraction) * total as f64 - 1e-9;
    Ok(t as f64 >= threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcaConfig {
    /// Channel widths of the strided encoder; the output width always equals
    /// the deepest block input width.
    pub widths: Vec<usize>,
    pub gate_fraction: f64,
    pub augment: AugmentPolicy,
}

impl Default for AcaConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 64],
            gate_fraction: 0.2,
            augment: AugmentPolicy::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ContentAdapter {
    config: AcaConfig,
    conv_in: Conv2d,
    downs: Vec<Conv2d>,
    conv_out: Conv2d,
    image_size: usize,
}

impl ContentAdapter {
    pub fn new(b: &mut Builder, config: &AcaConfig, diffusion: &DiffusionConfig) -> Result<Self> {
        config.augment.validate()?;
        if config.widths.is_empty() {
            return Err(Error::Config("content adapter needs at least one width".into()));
        }
        let steps = diffusion.unet_widths.len() - 1;
        let width = |i: usize| config.widths[i.min(config.widths.len() - 1)];
        b.scoped("aca", |b| {
            let conv_in = Conv2d::new(b, "conv_in", diffusion.channels, width(0), 3, 1)?;
            let downs = (0..steps)
                .map(|i| Conv2d::new(b, &format!("down.{i}"), width(i), width(i + 1), 3, 2))
                .collect::<Result<Vec<_>>>()?;
            // Zero output projection: the adapter starts as a no-op.
            let conv_out = Conv2d::zeroed(b, "conv_out", width(steps), diffusion.deepest_input_channels(), 1)?;
            Ok(Self {
                config: config.clone(),
                conv_in,
                downs,
                conv_out,
                image_size: diffusion.image_size,
            })
        })
    }

    pub fn config(&self) -> &AcaConfig {
        &self.config
    }

    /// Encodes `(B, 3, H, W)` images in `[0, 1]`; all items start active.
    pub fn encode_content(&self, images: &Tensor) -> Result<AcaFeatures> {
        let (b, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::Format(format!("content adapter expects RGB input, got {c} channels")));
        }
        let factor = 1usize << self.downs.len();
        if h != self.image_size || w != self.image_size || h % factor != 0 {
            return Err(Error::Shape(format!(
                "content input {h}x{w} incompatible with {}x{} stride chain",
                self.image_size, self.image_size
            )));
        }
        let dtype = self.conv_in.weight.var().dtype();
        let x = images
            .to_dtype(dtype)?
            .affine(2.0, -1.0)?
            .permute((0, 2, 3, 1))?
            .contiguous()?;
        let mut hcur = silu(&self.conv_in.forward(&x)?)?;
        for d in &self.downs {
            hcur = silu(&d.forward(&hcur)?)?;
        }
        Ok(AcaFeatures {
            feature_map: self.conv_out.forward(&hcur)?,
            active: vec![true; b],
        })
    }
}
