use candle_core::{Tensor, D};

use super::{DiffusionConfig, NoisyLatent};
use crate::adaptation::{AdaptedProjection, CrossAttention};
use crate::error::{Error, Result};
use crate::nn::{attention, gelu, silu, timestep_embedding, upsample_nearest2x, Builder, Conv2d, GroupNorm, LayerNorm, Linear};
use crate::text::EncodedContext;

/// Content features injected at the input of the deepest encoder block.
#[derive(Debug, Clone)]
pub struct AcaFeatures {
    /// `(B, h, w, C)` channels-last, matching the deepest block input.
    pub feature_map: Tensor,
    /// Per-item gate; inactive items receive no injection.
    pub active: Vec<bool>,
}

impl AcaFeatures {
    pub fn any_active(&self) -> bool {
        self.active.iter().any(|a| *a)
    }

    fn masked(&self) -> Result<Tensor> {
        let b = self.feature_map.dim(0)?;
        if self.active.iter().all(|a| *a) {
            return Ok(self.feature_map.clone());
        }
        let mask: Vec<f32> = self.active.iter().map(|a| if *a { 1.0 } else { 0.0 }).collect();
        let mask = Tensor::from_vec(mask, (b, 1, 1, 1), self.feature_map.device())?
            .to_dtype(self.feature_map.dtype())?;
        Ok(self.feature_map.broadcast_mul(&mask)?)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(b: &mut Builder, name: &str, c_in: usize, c_out: usize, temb_dim: usize, groups: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                norm1: GroupNorm::new(b, "norm1", c_in, groups)?,
                conv1: Conv2d::new(b, "conv1", c_in, c_out, 3, 1)?,
                temb: Linear::new(b, "temb", temb_dim, c_out, true)?,
                norm2: GroupNorm::new(b, "norm2", c_out, groups)?,
                conv2: Conv2d::new(b, "conv2", c_out, c_out, 3, 1)?,
                skip: if c_in != c_out {
                    Some(Conv2d::new(b, "skip", c_in, c_out, 1, 1)?)
                } else {
                    None
                },
            })
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        let (b, _, _, c) = h.dims4()?;
        let t = self.temb.forward(temb)?.reshape((b, 1, 1, c))?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Self-attention, cross-attention and feed-forward over image tokens.
#[derive(Debug, Clone)]
struct SpatialTransformer {
    norm: GroupNorm,
    proj_in: Linear,
    ln1: LayerNorm,
    qkv: Linear,
    self_out: Linear,
    ln2: LayerNorm,
    cross: CrossAttention,
    ln3: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    proj_out: Linear,
    heads: usize,
}

impl SpatialTransformer {
    fn new(b: &mut Builder, name: &str, c: usize, cfg: &DiffusionConfig) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                norm: GroupNorm::new(b, "norm", c, cfg.norm_groups)?,
                proj_in: Linear::new(b, "proj_in", c, c, true)?,
                ln1: LayerNorm::new(b, "ln1", c)?,
                qkv: Linear::new(b, "self_attn.qkv", c, 3 * c, false)?,
                self_out: Linear::new(b, "self_attn.out", c, c, true)?,
                ln2: LayerNorm::new(b, "ln2", c)?,
                cross: CrossAttention::new(b, "cross", c, cfg.context_dim, cfg.attention_heads, cfg.lora_rank)?,
                ln3: LayerNorm::new(b, "ln3", c)?,
                ff1: Linear::new(b, "ff1", c, 4 * c, true)?,
                ff2: Linear::new(b, "ff2", 4 * c, c, true)?,
                proj_out: Linear::new(b, "proj_out", c, c, true)?,
                heads: cfg.attention_heads,
            })
        })
    }

    fn forward(&self, x: &Tensor, context: &EncodedContext) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let tokens = self.norm.forward(x)?.reshape((b, h * w, c))?;
        let mut t = self.proj_in.forward(&tokens)?;
        let n = self.ln1.forward(&t)?;
        let qkv = self.qkv.forward(&n)?;
        let sa = attention(&qkv.narrow(2, 0, c)?, &qkv.narrow(2, c, c)?, &qkv.narrow(2, 2 * c, c)?, self.heads)?;
        t = (t + self.self_out.forward(&sa)?)?;
        t = (&t + self.cross.forward(&self.ln2.forward(&t)?, context)?)?;
        let ff = self.ff2.forward(&gelu(&self.ff1.forward(&self.ln3.forward(&t)?)?)?)?;
        t = (t + ff)?;
        let out = self.proj_out.forward(&t)?.reshape((b, h, w, c))?;
        Ok((x + out)?)
    }
}

#[derive(Debug, Clone)]
struct DownStage {
    res: ResBlock,
    attn: Option<SpatialTransformer>,
    down: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct UpStage {
    res: ResBlock,
    attn: Option<SpatialTransformer>,
    up: Option<Conv2d>,
}

/// Noise-prediction UNet with cross-attention at configured resolutions.
#[derive(Debug, Clone)]
pub struct UNet {
    config: DiffusionConfig,
    conv_in: Conv2d,
    time1: Linear,
    time2: Linear,
    down: Vec<DownStage>,
    mid_res1: ResBlock,
    mid_attn: SpatialTransformer,
    mid_res2: ResBlock,
    up: Vec<UpStage>,
    out_norm: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(b: &mut Builder, config: &DiffusionConfig) -> Result<Self> {
        config.validate()?;
        let widths = &config.unet_widths;
        let n = widths.len();
        let res = config.stage_resolutions();
        let groups = config.norm_groups;
        let temb_dim = 4 * widths[0];
        let attn_at = |i: usize| config.cross_attention_resolutions.contains(&res[i]);
        b.scoped("unet", |b| {
            let conv_in = Conv2d::new(b, "conv_in", config.channels, widths[0], 3, 1)?;
            let time1 = Linear::new(b, "time.fc1", widths[0], temb_dim, true)?;
            let time2 = Linear::new(b, "time.fc2", temb_dim, temb_dim, true)?;
            let mut down = Vec::with_capacity(n);
            let mut c = widths[0];
            for i in 0..n {
                let stage = b.scoped(&format!("down.{i}"), |b| {
                    let res_block = ResBlock::new(b, "res", c, widths[i], temb_dim, groups)?;
                    let attn = if attn_at(i) {
                        Some(SpatialTransformer::new(b, "attn", widths[i], config)?)
                    } else {
                        None
                    };
                    let down = if i + 1 < n {
                        Some(Conv2d::new(b, "downsample", widths[i], widths[i], 3, 2)?)
                    } else {
                        None
                    };
                    Ok(DownStage { res: res_block, attn, down })
                })?;
                c = widths[i];
                down.push(stage);
            }
            let mid_res1 = ResBlock::new(b, "mid.res1", c, c, temb_dim, groups)?;
            let mid_attn = SpatialTransformer::new(b, "mid.attn", c, config)?;
            let mid_res2 = ResBlock::new(b, "mid.res2", c, c, temb_dim, groups)?;
            let mut up = Vec::with_capacity(n);
            for i in (0..n).rev() {
                let stage = b.scoped(&format!("up.{i}"), |b| {
                    let res_block = ResBlock::new(b, "res", c + widths[i], widths[i], temb_dim, groups)?;
                    let attn = if attn_at(i) {
                        Some(SpatialTransformer::new(b, "attn", widths[i], config)?)
                    } else {
                        None
                    };
                    let up = if i > 0 {
                        Some(Conv2d::new(b, "upsample", widths[i], widths[i], 3, 1)?)
                    } else {
                        None
                    };
                    Ok(UpStage { res: res_block, attn, up })
                })?;
                c = widths[i];
                up.push(stage);
            }
            let out_norm = GroupNorm::new(b, "out_norm", c, groups)?;
            let conv_out = Conv2d::new(b, "conv_out", c, config.channels, 3, 1)?;
            Ok(Self {
                config: config.clone(),
                conv_in,
                time1,
                time2,
                down,
                mid_res1,
                mid_attn,
                mid_res2,
                up,
                out_norm,
                conv_out,
            })
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.config
    }

    fn transformers(&self) -> impl Iterator<Item = &SpatialTransformer> {
        self.down
            .iter()
            .filter_map(|s| s.attn.as_ref())
            .chain(std::iter::once(&self.mid_attn))
            .chain(self.up.iter().filter_map(|s| s.attn.as_ref()))
    }

    pub fn cross_attentions(&self) -> Vec<&CrossAttention> {
        self.transformers().map(|t| &t.cross).collect()
    }

    pub fn adapted_projections(&self) -> Vec<&AdaptedProjection> {
        self.transformers()
            .flat_map(|t| t.cross.projections())
            .collect()
    }

    pub fn adapted_projections_mut(&mut self) -> Vec<&mut AdaptedProjection> {
        let mut out = Vec::new();
        for s in &mut self.down {
            if let Some(a) = &mut s.attn {
                out.extend(a.cross.projections_mut());
            }
        }
        out.extend(self.mid_attn.cross.projections_mut());
        for s in &mut self.up {
            if let Some(a) = &mut s.attn {
                out.extend(a.cross.projections_mut());
            }
        }
        out
    }

    pub fn predict_noise(&self, x_t: &NoisyLatent, context: &EncodedContext, aca: Option<&AcaFeatures>) -> Result<Tensor> {
        self.forward(&x_t.x_t, &x_t.t, context, aca)
    }

    /// `x` is `(B, C, H, W)`; returns the noise estimate of the same shape.
    pub fn forward(&self, x: &Tensor, t: &[usize], context: &EncodedContext, aca: Option<&AcaFeatures>) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let cfg = &self.config;
        if c != cfg.channels || h != cfg.image_size || w != cfg.image_size {
            return Err(Error::Shape(format!(
                "input {:?} vs configured ({}, {}, {})",
                x.dims(),
                cfg.channels,
                cfg.image_size,
                cfg.image_size
            )));
        }
        if t.len() != b {
            return Err(Error::Shape(format!("{} timesteps for batch of {b}", t.len())));
        }
        if context.width() != cfg.context_dim {
            return Err(Error::Config(format!(
                "context width {} vs context_dim {}",
                context.width(),
                cfg.context_dim
            )));
        }
        let repeated;
        let context = if context.batch() == b {
            context
        } else if context.batch() == 1 {
            repeated = context.repeat(b)?;
            &repeated
        } else {
            return Err(Error::Shape(format!("context batch {} vs input batch {b}", context.batch())));
        };
        if let Some(a) = aca {
            let expect = [b, cfg.deepest_resolution(), cfg.deepest_resolution(), cfg.deepest_input_channels()];
            if a.feature_map.dims() != expect || a.active.len() != b {
                return Err(Error::Shape(format!(
                    "content features {:?} vs deepest block input {expect:?}",
                    a.feature_map.dims()
                )));
            }
        }

        let dtype = self.conv_in.weight.var().dtype();
        let temb = timestep_embedding(t, cfg.unet_widths[0], dtype)?;
        let temb = silu(&self.time2.forward(&silu(&self.time1.forward(&temb)?)?)?)?;

        let mut hcur = self.conv_in.forward(&x.to_dtype(dtype)?.permute((0, 2, 3, 1))?.contiguous()?)?;
        let last = self.down.len() - 1;
        let mut skips = Vec::with_capacity(self.down.len());
        for (i, stage) in self.down.iter().enumerate() {
            if i == last {
                if let Some(a) = aca.filter(|a| a.any_active()) {
                    hcur = (hcur + a.masked()?.to_dtype(dtype)?)?;
                }
            }
            hcur = stage.res.forward(&hcur, &temb)?;
            if let Some(attn) = &stage.attn {
                hcur = attn.forward(&hcur, context)?;
            }
            skips.push(hcur.clone());
            if let Some(down) = &stage.down {
                hcur = down.forward(&hcur)?;
            }
        }
        hcur = self.mid_res1.forward(&hcur, &temb)?;
        hcur = self.mid_attn.forward(&hcur, context)?;
        hcur = self.mid_res2.forward(&hcur, &temb)?;
        for stage in &self.up {
            let skip = skips.pop().expect("one skip per stage");
            hcur = Tensor::cat(&[&hcur, &skip], D::Minus1)?;
            hcur = stage.res.forward(&hcur, &temb)?;
            if let Some(attn) = &stage.attn {
                hcur = attn.forward(&hcur, context)?;
            }
            if let Some(up) = &stage.up {
                hcur = up.forward(&upsample_nearest2x(&hcur)?)?;
            }
        }
        let out = self.conv_out.forward(&silu(&self.out_norm.forward(&hcur)?)?)?;
        Ok(out.permute((0, 3, 1, 2))?.contiguous()?)
    }
}
