//! DDIM sampling with classifier-free guidance, single- and multi-reference
//! generation, and hierarchical style mixing.

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::{image_hash, save_png};
use crate::model::{Model, Phase};
use crate::nn::Init;
use crate::residual::FinetuneResidual;
use crate::style::{average_style_embeddings, mix_style_embeddings, StyleEmbedding};
use crate::text::EncodedContext;

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_CFG_SCALE: f64 = 9.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleOptions {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
    pub alpha_scale: f64,
    pub eta: f64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            cfg_scale: DEFAULT_CFG_SCALE,
            seed: 0,
            alpha_scale: 1.0,
            eta: 0.0,
        }
    }
}

impl SampleOptions {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Argument("steps must be at least 1".into()));
        }
        if !(self.cfg_scale >= 0.0) || !self.cfg_scale.is_finite() {
            return Err(Error::Argument(format!("cfg scale must be non-negative, got {}", self.cfg_scale)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Argument(format!("eta {} outside [0, 1]", self.eta)));
        }
        if !(self.alpha_scale >= 0.0) || !self.alpha_scale.is_finite() {
            return Err(Error::Argument(format!("alpha scale must be non-negative, got {}", self.alpha_scale)));
        }
        Ok(())
    }
}

/// `uncond + scale * (cond - uncond)`.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    if eps_cond.dims() != eps_uncond.dims() {
        return Err(Error::Shape(format!(
            "conditional {:?} vs unconditional {:?}",
            eps_cond.dims(),
            eps_uncond.dims()
        )));
    }
    Ok((eps_uncond + ((eps_cond - eps_uncond)? * scale)?)?)
}

/// `steps` evenly spaced timesteps, descending from `T` and excluding 0.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Argument(format!("{steps} sampling steps for {total} timesteps")));
    }
    let mut ts: Vec<usize> = (1..=steps)
        .map(|k| ((total as f64 * k as f64 / steps as f64).round() as usize).clamp(1, total))
        .collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

/// Runs the reverse process from seeded noise and returns `(B, 3, S, S)` in
/// `[0, 1]`, where `B` is the context batch. The content adapter is never
/// consulted.
pub fn ddim_sample(model: &Model, context: &EncodedContext, opts: &SampleOptions) -> Result<Tensor> {
    opts.validate()?;
    model.set_phase(Phase::Inference);
    let schedule = model.schedule();
    let b = context.batch();
    let s = model.image_size();
    let uncond = model.unconditional_context()?.repeat(b)?;
    let mut init = Init::new(opts.seed, DType::F32);
    let mut x = init.normal(&[b, 3, s, s], 1.0)?;
    let ts = ddim_timesteps(schedule.timesteps(), opts.steps)?;
    for (k, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(k + 1).copied().unwrap_or(0);
        let tvec = vec![t; b];
        let eps_c = model.unet().forward(&x, &tvec, context, None)?;
        let eps_u = model.unet().forward(&x, &tvec, &uncond, None)?;
        let eps = cfg_combine(&eps_c, &eps_u, opts.cfg_scale)?;
        let ab = schedule.alpha_bar(t)?;
        let ab_prev = schedule.alpha_bar(t_prev)?;
        let x0 = ((&x - (&eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?.clamp(-1.0, 1.0)?;
        let sigma = opts.eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).max(0.0).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        // Direction term uses the noise implied by the clamped estimate.
        let eps_hat = ((&x - (&x0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?;
        let mut next = ((&x0 * ab_prev.sqrt())? + (eps_hat * dir)?)?;
        if sigma > 0.0 && t_prev > 0 {
            next = (next + (init.normal(&[b, 3, s, s], 1.0)? * sigma)?)?;
        }
        if !next.sum_all()?.to_scalar::<f32>()?.is_finite() {
            return Err(Error::NonFinite(format!("sampling step {k} (t = {t}) produced non-finite values")));
        }
        x = next;
    }
    Ok(((x.clamp(-1.0, 1.0)? + 1.0)? / 2.0)?)
}

/// A generated image and its reproducibility record.
#[derive(Debug, Clone)]
pub struct Generated {
    /// `(3, S, S)` in `[0, 1]`.
    pub image: Tensor,
    pub metadata: serde_json::Value,
}

impl Generated {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_png(path, &self.image, &[("hstyle", self.metadata.to_string())])
    }
}

/// Temporarily applies a sidecar and alpha scale, then restores the model.
fn with_adjustments<T>(
    model: &mut Model,
    sidecar: Option<&FinetuneResidual>,
    alpha_scale: f64,
    f: impl FnOnce(&Model) -> Result<T>,
) -> Result<T> {
    let previous = model.alpha_scale();
    model.scale_alpha(alpha_scale)?;
    if let Some(r) = sidecar {
        if let Err(e) = model.attach_residual(r) {
            model.scale_alpha(previous)?;
            return Err(e);
        }
    }
    let out = f(model);
    if sidecar.is_some() {
        model.detach_residual();
    }
    model.scale_alpha(previous)?;
    out
}

/// Generation from an already computed style embedding (or none).
pub fn generate_with_embedding(
    model: &mut Model,
    prompt: &str,
    style: Option<&StyleEmbedding>,
    sidecar: Option<&FinetuneResidual>,
    opts: &SampleOptions,
) -> Result<Generated> {
    opts.validate()?;
    let image = with_adjustments(model, sidecar, opts.alpha_scale, |m| {
        let ctx = m.context(prompt, style)?;
        Ok(ddim_sample(m, &ctx, opts)?.squeeze(0)?)
    })?;
    let metadata = serde_json::json!({
        "prompt": prompt,
        "options": opts,
        "style_sources": style.map(|s| s.source_level_map().to_vec()),
        "sidecar": sidecar.map(|r| &r.meta),
    });
    Ok(Generated { image, metadata })
}

/// Plain text-to-image for no references, the reference's embedding for one,
/// and the averaged embedding for several.
pub fn generate(
    model: &mut Model,
    prompt: &str,
    style_images: &[Tensor],
    sidecar: Option<&FinetuneResidual>,
    opts: &SampleOptions,
) -> Result<Generated> {
    let style = match style_images.len() {
        0 => None,
        _ => {
            let embeddings = style_images
                .iter()
                .map(|img| model.encode_style(img))
                .collect::<Result<Vec<_>>>()?;
            Some(average_style_embeddings(&embeddings)?)
        }
    };
    let mut out = generate_with_embedding(model, prompt, style.as_ref(), sidecar, opts)?;
    let hashes = style_images.iter().map(image_hash).collect::<Result<Vec<_>>>()?;
    out.metadata["style_hashes"] = serde_json::json!(hashes);
    Ok(out)
}

/// Low, mid and high style levels from three references. A sidecar is applied
/// only when all three references are the same image, unless forced.
pub fn generate_mixed(
    model: &mut Model,
    prompt: &str,
    [low, mid, high]: [&Tensor; 3],
    sidecar: Option<&FinetuneResidual>,
    force_sidecar: bool,
    opts: &SampleOptions,
) -> Result<Generated> {
    let e = [low, mid, high]
        .iter()
        .map(|img| model.encode_style(img))
        .collect::<Result<Vec<_>>>()?;
    let mixed = mix_style_embeddings(&e[0], &e[1], &e[2])?;
    let applied = sidecar.filter(|_| force_sidecar || mixed.single_source());
    let mut out = generate_with_embedding(model, prompt, Some(&mixed), applied, opts)?;
    out.metadata["provenance"] = serde_json::json!({
        "low": mixed.source_level_map()[0],
        "mid": mixed.source_level_map()[1],
        "high": mixed.source_level_map()[2],
    });
    out.metadata["sidecar_applied"] = serde_json::json!(applied.is_some());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn scalar(v: f32) -> Tensor {
        Tensor::new(&[v], &Device::Cpu).unwrap()
    }

    #[test]
    fn cfg_examples() {
        let c = scalar(2.0);
        let u = scalar(1.0);
        let at = |s| cfg_combine(&c, &u, s).unwrap().to_vec1::<f32>().unwrap()[0];
        assert_eq!(at(1.0), 2.0);
        assert_eq!(at(0.0), 1.0);
        assert_eq!(at(9.0), 10.0);
        assert!(matches!(
            cfg_combine(&c, &Tensor::zeros(2, DType::F32, &Device::Cpu).unwrap(), 1.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn timestep_subset() {
        let ts = ddim_timesteps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 1000);
        assert_eq!(*ts.last().unwrap(), 20);
        assert!(ts.windows(2).all(|w| w[0] - w[1] == 20));
        assert_eq!(ddim_timesteps(1000, 1).unwrap(), vec![1000]);
        assert!(ddim_timesteps(1000, 0).is_err());
    }

    #[test]
    fn option_defaults_and_validation() {
        let o = SampleOptions::default();
        assert_eq!((o.steps, o.cfg_scale, o.eta, o.alpha_scale), (50, 9.0, 0.0, 1.0));
        assert!(SampleOptions { eta: 1.5, ..o.clone() }.validate().is_err());
        assert!(SampleOptions { cfg_scale: -1.0, ..o.clone() }.validate().is_err());
        assert!(SampleOptions { steps: 0, ..o }.validate().is_err());
    }
}
