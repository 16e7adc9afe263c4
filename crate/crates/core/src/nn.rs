//! Layer primitives over channels-last (`B, H, W, C`) activations.
//!
//! Convolutions lower to a single GEMM through an im2col custom op whose
//! backward pass is the matching col2im scatter, which keeps both directions
//! on the fast matrix-multiply path.

use std::ops::AddAssign;
use std::sync::Arc;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::params::{Group, Param, ParamRegistry};

/// Deterministic parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl Init {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn from_vec(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.sample::<f64, _>(StandardNormal) * std)
            .collect();
        self.from_vec(data, shape)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.from_vec(data, shape)
    }

    pub fn zeros(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(shape, self.dtype, &self.device)?)
    }

    pub fn ones(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::ones(shape, self.dtype, &self.device)?)
    }
}

/// Shared context for building layers: registry, initializer and name prefix.
pub struct Builder<'a> {
    pub registry: &'a Arc<ParamRegistry>,
    pub init: &'a mut Init,
    prefix: String,
    group: Group,
}

impl<'a> Builder<'a> {
    pub fn new(registry: &'a Arc<ParamRegistry>, init: &'a mut Init, group: Group) -> Self {
        Self {
            registry,
            init,
            prefix: String::new(),
            group,
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Builder) -> Result<T>) -> Result<T> {
        let saved = std::mem::replace(&mut self.prefix, String::new());
        self.prefix = if saved.is_empty() {
            name.to_string()
        } else {
            format!("{saved}.{name}")
        };
        let out = f(self);
        self.prefix = saved;
        out
    }

    /// Runs `f` with a different parameter group.
    pub fn grouped<T>(&mut self, group: Group, f: impl FnOnce(&mut Builder) -> Result<T>) -> Result<T> {
        let saved = self.group;
        self.group = group;
        let out = f(self);
        self.group = saved;
        out
    }

    pub fn group(&self) -> Group {
        self.group
    }

    pub fn param(&mut self, name: &str, init: Tensor) -> Result<Param> {
        let path = self.path(name);
        self.registry.create(path, self.group, init)
    }
}

// ---------------------------------------------------------------------------
// im2col / col2im

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }
}

fn im2col_impl<T: Copy + Default>(src: &[T], g: ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let row = g.k * g.k * g.c;
    let mut out = vec![T::default(); g.b * ho * wo * row];
    for bi in 0..g.b {
        for oy in 0..ho {
            for ox in 0..wo {
                let dst_row = ((bi * ho + oy) * wo + ox) * row;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let s = ((bi * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let d = dst_row + (ky * g.k + kx) * g.c;
                        out[d..d + g.c].copy_from_slice(&src[s..s + g.c]);
                    }
                }
            }
        }
    }
    out
}

fn col2im_impl<T: Copy + Default + AddAssign>(cols: &[T], g: ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let row = g.k * g.k * g.c;
    let mut out = vec![T::default(); g.b * g.h * g.w * g.c];
    for bi in 0..g.b {
        for oy in 0..ho {
            for ox in 0..wo {
                let src_row = ((bi * ho + oy) * wo + ox) * row;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let d = ((bi * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let s = src_row + (ky * g.k + kx) * g.c;
                        for (o, v) in out[d..d + g.c].iter_mut().zip(&cols[s..s + g.c]) {
                            *o += *v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col/col2im expect contiguous input"),
    }
}

struct Im2Col {
    k: usize,
    stride: usize,
    pad: usize,
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, h, w, c) = layout.shape().dims4()?;
        let g = ConvGeom {
            b,
            h,
            w,
            c,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        };
        let (ho, wo) = g.out_hw();
        let shape = Shape::from((b * ho * wo, self.k * self.k * c));
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(im2col_impl(contiguous_slice(d, layout)?, g)),
            CpuStorage::F64(d) => CpuStorage::F64(im2col_impl(contiguous_slice(d, layout)?, g)),
            _ => candle_core::bail!("im2col: unsupported dtype"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, h, w, c) = arg.dims4()?;
        let op = Col2Im {
            g: ConvGeom {
                b,
                h,
                w,
                c,
                k: self.k,
                stride: self.stride,
                pad: self.pad,
            },
        };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

struct Col2Im {
    g: ConvGeom,
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.g;
        let shape = Shape::from((g.b, g.h, g.w, g.c));
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(col2im_impl(contiguous_slice(d, layout)?, g)),
            CpuStorage::F64(d) => CpuStorage::F64(col2im_impl(contiguous_slice(d, layout)?, g)),
            _ => candle_core::bail!("col2im: unsupported dtype"),
        };
        Ok((out, shape))
    }
}

/// Patch matrix `(B*Ho*Wo, k*k*C)` of a channels-last input, rows ordered
/// `(ky, kx, c)`.
pub fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Im2Col { k, stride, pad })?)
}

// ---------------------------------------------------------------------------
// layers

/// `y = x W + b` over the last dimension; `W` is stored `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        b.scoped(name, |b| {
            let w = b.init.uniform(&[d_in, d_out], bound)?;
            let weight = b.param("weight", w)?;
            let bias = if bias {
                let t = b.init.uniform(&[d_out], bound)?;
                Some(b.param("bias", t)?)
            } else {
                None
            };
            Ok(Self { weight, bias })
        })
    }

    /// Same as [`Linear::new`] with all-zero weight and bias.
    pub fn zeroed(b: &mut Builder, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        b.scoped(name, |b| {
            let weight = b.param("weight", b.init.zeros(&[d_in, d_out])?)?;
            let bias = if bias {
                Some(b.param("bias", b.init.zeros(&[d_out])?)?)
            } else {
                None
            };
            Ok(Self { weight, bias })
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.weight.get(), self.bias.as_ref().map(|b| b.get()).as_ref())
    }
}

/// Applies `(in, out)` weights over the last dimension of `x` of any rank.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let d_in = *dims.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
    let (w_in, w_out) = weight.dims2()?;
    if d_in != w_in {
        return Err(Error::Shape(format!("linear: input width {d_in} vs weight rows {w_in}")));
    }
    let rows = x.elem_count() / d_in;
    let y = x.reshape((rows, d_in))?.matmul(weight)?;
    let y = match bias {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    };
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = w_out;
    Ok(y.reshape(out_dims)?)
}

/// Convolution over channels-last input with weights stored `(k, k, in, out)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        let fan_in = (c_in * k * k) as f64;
        // He-style scale; suits the SiLU/ReLU stacks used throughout.
        let std = (2.0 / fan_in).sqrt();
        let bound = 1.0 / fan_in.sqrt();
        b.scoped(name, |b| {
            let w = b.init.normal(&[k, k, c_in, c_out], std)?;
            let weight = b.param("weight", w)?;
            let bias = b.init.uniform(&[c_out], bound)?;
            let bias = b.param("bias", bias)?;
            Ok(Self {
                weight,
                bias,
                k,
                stride,
                pad: k / 2,
            })
        })
    }

    pub fn zeroed(b: &mut Builder, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        b.scoped(name, |b| {
            let weight = b.param("weight", b.init.zeros(&[k, k, c_in, c_out])?)?;
            let bias = b.param("bias", b.init.zeros(&[c_out])?)?;
            Ok(Self {
                weight,
                bias,
                k,
                stride: 1,
                pad: k / 2,
            })
        })
    }

    pub fn c_in(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn c_out(&self) -> usize {
        self.weight.dims()[3]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight.get(), &self.bias.get(), self.stride, self.pad)
    }
}

pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let (k, _, c_in, c_out) = weight.dims4()?;
    if c != c_in {
        return Err(Error::Shape(format!("conv2d: input has {c} channels, kernel expects {c_in}")));
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::Shape(format!("conv2d: {h}x{w} input smaller than kernel {k}")));
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let w2 = weight.reshape((k * k * c_in, c_out))?;
    let cols = if k == 1 && stride == 1 && pad == 0 {
        x.reshape((b * h * w, c))?
    } else {
        im2col(x, k, stride, pad)?
    };
    let y = cols.matmul(&w2)?.broadcast_add(bias)?;
    Ok(y.reshape((b, ho, wo, c_out))?)
}

/// Group normalization over channels-last input.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Param,
    pub beta: Param,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(b: &mut Builder, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!(
                "group norm: {channels} channels not divisible into {groups} groups"
            )));
        }
        b.scoped(name, |b| {
            let gamma = b.param("gamma", b.init.ones(&[channels])?)?;
            let beta = b.param("beta", b.init.zeros(&[channels])?)?;
            Ok(Self {
                gamma,
                beta,
                groups,
                eps: 1e-5,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let xg = x.reshape((b, h * w, self.groups, c / self.groups))?;
        let mean = xg.mean_keepdim(3)?.mean_keepdim(1)?;
        let centered = xg.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(3)?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let normed = normed.reshape((b, h, w, c))?;
        Ok(normed.broadcast_mul(&self.gamma.get())?.broadcast_add(&self.beta.get())?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Result<Self> {
        b.scoped(name, |b| {
            let gamma = b.param("gamma", b.init.ones(&[dim])?)?;
            let beta = b.param("beta", b.init.zeros(&[dim])?)?;
            Ok(Self { gamma, beta, eps: 1e-5 })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma.get())?.broadcast_add(&self.beta.get())?)
    }
}

/// Splits `(B, S, C)` into `(B*heads, S, C/heads)`.
fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, s, c) = x.dims3()?;
    Ok(x
        .reshape((b, s, heads, c / heads))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * heads, s, c / heads))?)
}

fn merge_heads(x: &Tensor, batch: usize) -> Result<Tensor> {
    let (bh, s, dh) = x.dims3()?;
    let heads = bh / batch;
    Ok(x
        .reshape((batch, heads, s, dh))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((batch, s, heads * dh))?)
}

/// Softmax attention probabilities `(B*heads, Sq, Sk)`.
pub fn attention_weights(q: &Tensor, k: &Tensor, heads: usize) -> Result<Tensor> {
    let (_, _, c) = q.dims3()?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("attention: width {c} not divisible by {heads} heads")));
    }
    if k.dim(2)? != c {
        return Err(Error::Config(format!(
            "attention: query width {c} vs key width {}",
            k.dim(2)?
        )));
    }
    let scale = 1.0 / ((c / heads) as f64).sqrt();
    let qh = split_heads(q, heads)?;
    let kh = split_heads(k, heads)?;
    let scores = (qh.matmul(&kh.t()?)? * scale)?;
    Ok(candle_nn::ops::softmax(&scores, D::Minus1)?)
}

/// Multi-head scaled dot-product attention over `(B, S, C)` inputs.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let batch = q.dim(0)?;
    if v.dim(2)? % heads != 0 {
        return Err(Error::Config(format!("attention: value width not divisible by {heads} heads")));
    }
    let probs = attention_weights(q, k, heads)?;
    let vh = split_heads(v, heads)?;
    merge_heads(&probs.matmul(&vh)?, batch)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// 2x nearest-neighbour upsampling of channels-last input.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x
        .reshape((b, h, 1, w, 1, c))?
        .broadcast_as((b, h, 2, w, 2, c))?
        .contiguous()?
        .reshape((b, 2 * h, 2 * w, c))?)
}

/// 2x2 max pooling of channels-last input (no gradient needed by callers).
pub fn max_pool2x(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max_pool2x: odd spatial size {h}x{w}")));
    }
    Ok(x.reshape((b, h / 2, 2, w / 2, 2, c))?.max(4)?.max(2)?)
}

/// Sinusoidal embedding of integer timesteps, `(B, dim)`.
pub fn timestep_embedding(t: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((ti as f64 * freq).cos());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((ti as f64 * freq).sin());
        }
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}
