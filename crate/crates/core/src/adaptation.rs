//! Style-only residual K/V projections for cross-attention.
//!
//! An [`AdaptedProjection`] computes `h = x W + b` at every context position
//! and adds `(runtime_scale * alpha) * (x ΔW) [+ Δh]` at the style positions
//! only. Text positions are copied straight from the base projection, so their
//! residual contribution is zero by construction rather than numerically.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{attention, attention_weights, linear, Builder, Linear};
use crate::params::{Group, Param, ParamRegistry};
use crate::text::EncodedContext;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProjectionKind {
    Key,
    Value,
}

impl ProjectionKind {
    pub fn suffix(self) -> &'static str {
        match self {
            ProjectionKind::Key => "to_k",
            ProjectionKind::Value => "to_v",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdaptedProjection {
    path: String,
    kind: ProjectionKind,
    weight: Param,
    bias: Param,
    delta_down: Param,
    delta_up: Param,
    alpha: Param,
    alpha_runtime_scale: f64,
    delta_h: Option<Param>,
}

impl AdaptedProjection {
    /// Base weight goes to the builder's group; the residual factors and the
    /// learnable scale go to [`Group::Explicit`].
    pub fn new(b: &mut Builder, kind: ProjectionKind, d_in: usize, d_out: usize, rank: usize) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "adapter rank {rank} outside [1, {}]",
                d_in.min(d_out)
            )));
        }
        let path = b.path(kind.suffix());
        let base = Linear::new(b, kind.suffix(), d_in, d_out, true)?;
        let bound = 1.0 / (d_in as f64).sqrt();
        let (delta_down, delta_up, alpha) = b.scoped(kind.suffix(), |b| {
            b.grouped(Group::Explicit, |b| {
                let down = b.init.uniform(&[d_in, rank], bound)?;
                let down = b.param("delta_down", down)?;
                let up = b.param("delta_up", b.init.zeros(&[rank, d_out])?)?;
                let alpha = b.param("alpha", b.init.ones(&[1])?)?;
                Ok((down, up, alpha))
            })
        })?;
        Ok(Self {
            path,
            kind,
            weight: base.weight,
            bias: base.bias.expect("base projection has a bias"),
            delta_down,
            delta_up,
            alpha,
            alpha_runtime_scale: 1.0,
            delta_h: None,
        })
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn kind(&self) -> ProjectionKind {
        self.kind
    }

    pub fn d_in(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn rank(&self) -> usize {
        self.delta_down.dims()[1]
    }

    pub fn weight(&self) -> &Param {
        &self.weight
    }

    pub fn bias(&self) -> &Param {
        &self.bias
    }

    pub fn delta_down(&self) -> &Param {
        &self.delta_down
    }

    pub fn delta_up(&self) -> &Param {
        &self.delta_up
    }

    pub fn alpha(&self) -> &Param {
        &self.alpha
    }

    pub fn delta_h(&self) -> Option<&Param> {
        self.delta_h.as_ref()
    }

    pub fn alpha_runtime_scale(&self) -> f64 {
        self.alpha_runtime_scale
    }

    pub fn set_alpha_runtime_scale(&mut self, factor: f64) -> Result<()> {
        if !(factor >= 0.0) || !factor.is_finite() {
            return Err(Error::Argument(format!("alpha scale must be a finite non-negative number, got {factor}")));
        }
        self.alpha_runtime_scale = factor;
        Ok(())
    }

    /// Registers a zero-valued finetune residual (replacing any existing one).
    pub fn allocate_residual(&mut self, registry: &std::sync::Arc<ParamRegistry>) -> Result<&Param> {
        let init = Tensor::zeros(self.d_out(), self.weight.var().dtype(), self.weight.var().device())?;
        self.set_residual(registry, &init)
    }

    pub fn set_residual(&mut self, registry: &std::sync::Arc<ParamRegistry>, value: &Tensor) -> Result<&Param> {
        if value.dims() != [self.d_out()] {
            return Err(Error::Shape(format!(
                "{}: residual of shape {:?}, expected [{}]",
                self.path,
                value.dims(),
                self.d_out()
            )));
        }
        self.clear_residual();
        let value = value.to_dtype(self.weight.var().dtype())?;
        let p = registry.create(format!("{}.delta_h", self.path), Group::Residual, value)?;
        Ok(self.delta_h.insert(p))
    }

    pub fn clear_residual(&mut self) {
        if let Some(p) = self.delta_h.take() {
            p.unregister();
        }
    }

    /// Materialized low-rank residual `ΔW = down · up`, `(d_in, d_out)`.
    pub fn delta_weight(&self) -> Result<Tensor> {
        Ok(self.delta_down.get().matmul(&self.delta_up.get())?)
    }

    /// Frozen projection `x W + b` at every position.
    pub fn base_forward(&self, context: &EncodedContext) -> Result<Tensor> {
        self.check_width(context)?;
        linear(context.hidden(), &self.weight.get(), Some(&self.bias.get()))
    }

    fn check_width(&self, context: &EncodedContext) -> Result<()> {
        if context.width() != self.d_in() {
            return Err(Error::Shape(format!(
                "{}: context width {} vs projection input {}",
                self.path,
                context.width(),
                self.d_in()
            )));
        }
        Ok(())
    }

    /// Adapted projection of the whole context sequence, `(B, S, d_out)`.
    pub fn forward(&self, context: &EncodedContext) -> Result<Tensor> {
        let base = self.base_forward(context)?;
        let n_style = context.style_len();
        if n_style == 0 {
            return Ok(base);
        }
        let seq = context.len();
        let x_style = context.hidden().narrow(1, 0, n_style)?;
        let low = linear(&x_style, &self.delta_down.get(), None)?;
        let residual = linear(&low, &self.delta_up.get(), None)?;
        let scale = self.alpha.get().affine(self.alpha_runtime_scale, 0.0)?;
        let mut residual = residual.broadcast_mul(&scale)?;
        if let Some(dh) = &self.delta_h {
            residual = residual.broadcast_add(&dh.get())?;
        }
        let style = (base.narrow(1, 0, n_style)? + residual)?;
        if seq == n_style {
            return Ok(style);
        }
        Ok(Tensor::cat(&[style, base.narrow(1, n_style, seq - n_style)?], 1)?)
    }
}

/// Cross-attention whose keys and values come from adapted projections.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub to_q: Linear,
    pub to_k: AdaptedProjection,
    pub to_v: AdaptedProjection,
    pub to_out: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new(b: &mut Builder, name: &str, query_dim: usize, context_dim: usize, heads: usize, rank: usize) -> Result<Self> {
        if heads == 0 || query_dim % heads != 0 {
            return Err(Error::Config(format!(
                "cross-attention width {query_dim} not divisible by {heads} heads"
            )));
        }
        b.scoped(name, |b| {
            Ok(Self {
                to_q: Linear::new(b, "to_q", query_dim, query_dim, false)?,
                to_k: AdaptedProjection::new(b, ProjectionKind::Key, context_dim, query_dim, rank)?,
                to_v: AdaptedProjection::new(b, ProjectionKind::Value, context_dim, query_dim, rank)?,
                to_out: Linear::new(b, "to_out", query_dim, query_dim, true)?,
                heads,
            })
        })
    }

    /// `x` is `(B, S_img, C)` image tokens.
    pub fn forward(&self, x: &Tensor, context: &EncodedContext) -> Result<Tensor> {
        self.check(x, context)?;
        let q = self.to_q.forward(x)?;
        let k = self.to_k.forward(context)?;
        let v = self.to_v.forward(context)?;
        self.to_out.forward(&attention(&q, &k, &v, self.heads)?)
    }

    /// Attention probabilities over the context, `(B*heads, S_img, S_ctx)`.
    pub fn weights(&self, x: &Tensor, context: &EncodedContext) -> Result<Tensor> {
        self.check(x, context)?;
        let q = self.to_q.forward(x)?;
        let k = self.to_k.forward(context)?;
        attention_weights(&q, &k, self.heads)
    }

    fn check(&self, x: &Tensor, context: &EncodedContext) -> Result<()> {
        let (b, _, c) = x.dims3()?;
        if c != self.to_q.d_in() {
            return Err(Error::Config(format!("cross-attention query width {c} vs {}", self.to_q.d_in())));
        }
        if context.batch() != b {
            return Err(Error::Shape(format!(
                "cross-attention batch {b} vs context batch {}",
                context.batch()
            )));
        }
        Ok(())
    }

    pub fn projections(&self) -> [&AdaptedProjection; 2] {
        [&self.to_k, &self.to_v]
    }

    pub fn projections_mut(&mut self) -> [&mut AdaptedProjection; 2] {
        [&mut self.to_k, &mut self.to_v]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use crate::text::STYLE_TOKENS;
    use candle_core::{DType, Device, D};

    fn scalar_proj(w: f64, alpha: f64, delta: f64) -> (std::sync::Arc<ParamRegistry>, AdaptedProjection) {
        let reg = ParamRegistry::new();
        let mut init = Init::new(0, DType::F64);
        let mut b = Builder::new(&reg, &mut init, Group::Backbone);
        let p = AdaptedProjection::new(&mut b, ProjectionKind::Key, 1, 1, 1).unwrap();
        let t = |v: f64, shape: &[usize]| Tensor::full(v, shape, &Device::Cpu).unwrap();
        reg.assign(p.weight().name(), &t(w, &[1, 1])).unwrap();
        reg.assign(p.bias().name(), &t(0.0, &[1])).unwrap();
        reg.assign(p.delta_down().name(), &t(delta, &[1, 1])).unwrap();
        reg.assign(p.delta_up().name(), &t(1.0, &[1, 1])).unwrap();
        reg.assign(p.alpha().name(), &t(alpha, &[1])).unwrap();
        (reg, p)
    }

    fn ctx_1d(style: &[f64], text: &[f64]) -> EncodedContext {
        let mut v = style.to_vec();
        v.extend_from_slice(text);
        let n = v.len();
        let t = Tensor::from_vec(v, (1, n, 1), &Device::Cpu).unwrap();
        EncodedContext::new(t, if style.is_empty() { 0 } else { STYLE_TOKENS }).unwrap()
    }

    #[test]
    fn one_dimensional_hand_evaluation() {
        // W = 2, alpha = 0.5, dW = 4, x = 3  =>  6 + 0.5 * 12 = 12
        let (_reg, p) = scalar_proj(2.0, 0.5, 4.0);
        let ctx = ctx_1d(&[3.0; 9], &[3.0, 1.0]);
        let h = p.forward(&ctx).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(&h[..9], &[12.0; 9]);
        assert_eq!(&h[9..], &[6.0, 2.0]);
    }

    #[test]
    fn residual_only_enters_style_positions() {
        let (reg, mut p) = scalar_proj(2.0, 1.0, 0.0);
        let v = Tensor::full(5.0f64, 1, &Device::Cpu).unwrap();
        p.set_residual(&reg, &v).unwrap();
        let ctx = ctx_1d(&[1.0; 9], &[1.0, 2.0]);
        let h = p.forward(&ctx).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(&h[..9], &[7.0; 9]);
        assert_eq!(&h[9..], &[2.0, 4.0]);
        p.clear_residual();
        assert!(reg.get(&format!("{}.delta_h", p.path())).is_none());
    }

    #[test]
    fn rank_bounds_and_negative_scale_rejected() {
        let reg = ParamRegistry::new();
        let mut init = Init::new(0, DType::F32);
        let mut b = Builder::new(&reg, &mut init, Group::Backbone);
        assert!(matches!(
            AdaptedProjection::new(&mut b, ProjectionKind::Key, 4, 3, 4),
            Err(Error::Config(_))
        ));
        let mut p = AdaptedProjection::new(&mut b, ProjectionKind::Value, 4, 3, 2).unwrap();
        assert!(matches!(p.set_alpha_runtime_scale(-0.5), Err(Error::Argument(_))));
        p.set_alpha_runtime_scale(0.0).unwrap();
    }

    #[test]
    fn single_token_context_broadcasts_its_value() {
        let reg = ParamRegistry::new();
        let mut init = Init::new(9, DType::F64);
        let mut b = Builder::new(&reg, &mut init, Group::Backbone);
        let attn = CrossAttention::new(&mut b, "attn", 8, 6, 2, 2).unwrap();
        let x = b.init.normal(&[1, 5, 8], 1.0).unwrap();
        let c = b.init.normal(&[1, 1, 6], 1.0).unwrap();
        let ctx = EncodedContext::new(c, 0).unwrap();
        let w = attn.weights(&x, &ctx).unwrap();
        let ones = w.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(ones.iter().all(|v| *v == 1.0));
        let out = attn.forward(&x, &ctx).unwrap();
        let v = attn.to_v.forward(&ctx).unwrap();
        let expect = attn.to_out.forward(&v).unwrap();
        let diff = out.broadcast_sub(&expect).unwrap().abs().unwrap().max_keepdim(D::Minus1).unwrap();
        assert!(diff.flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap() < 1e-12);
    }
}
