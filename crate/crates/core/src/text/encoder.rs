use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{EncodedContext, TokenSequence, STYLE_TOKENS};
use crate::error::{Error, Result};
use crate::nn::{attention, gelu, Builder, LayerNorm, Linear};
use crate::params::Param;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub max_text_tokens: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            max_text_tokens: 68,
            layers: 4,
            heads: 4,
        }
    }
}

impl TextConfig {
    pub fn max_positions(&self) -> usize {
        STYLE_TOKENS + self.max_text_tokens
    }
}

/// Embedded token rows `(B, L, d)`, positional offsets included.
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    pub vectors: Tensor,
    /// Whether positions were offset past the style slots.
    pub style_slots: bool,
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl EncoderBlock {
    fn forward(&self, x: &Tensor, heads: usize) -> Result<Tensor> {
        let d = x.dim(2)?;
        let h = self.ln1.forward(x)?;
        let qkv = self.qkv.forward(&h)?;
        let q = qkv.narrow(2, 0, d)?;
        let k = qkv.narrow(2, d, d)?;
        let v = qkv.narrow(2, 2 * d, d)?;
        let x = (x + self.out.forward(&attention(&q, &k, &v, heads)?)?)?;
        let h = self.ln2.forward(&x)?;
        let h = self.ff2.forward(&gelu(&self.ff1.forward(&h)?)?)?;
        Ok((x + h)?)
    }
}

/// Token table, learned positions and a bidirectional transformer stack.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    config: TextConfig,
    token_embedding: Param,
    position_embedding: Param,
    blocks: Vec<EncoderBlock>,
    final_norm: LayerNorm,
    width: usize,
}

impl TextEncoder {
    pub fn new(b: &mut Builder, config: &TextConfig, vocab_size: usize, width: usize) -> Result<Self> {
        if config.heads == 0 || width % config.heads != 0 {
            return Err(Error::Config(format!(
                "text width {width} not divisible by {} heads",
                config.heads
            )));
        }
        b.scoped("text", |b| {
            let token_embedding = b.init.normal(&[vocab_size, width], 0.02)?;
            let token_embedding = b.param("token_embedding", token_embedding)?;
            let position_embedding = b.init.normal(&[config.max_positions(), width], 0.01)?;
            let position_embedding = b.param("position_embedding", position_embedding)?;
            let blocks = (0..config.layers)
                .map(|i| {
                    b.scoped(&format!("blocks.{i}"), |b| {
                        Ok(EncoderBlock {
                            ln1: LayerNorm::new(b, "ln1", width)?,
                            qkv: Linear::new(b, "qkv", width, 3 * width, true)?,
                            out: Linear::new(b, "out", width, width, true)?,
                            ln2: LayerNorm::new(b, "ln2", width)?,
                            ff1: Linear::new(b, "ff1", width, 4 * width, true)?,
                            ff2: Linear::new(b, "ff2", 4 * width, width, true)?,
                        })
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let final_norm = LayerNorm::new(b, "final_norm", width)?;
            Ok(Self {
                config: config.clone(),
                token_embedding,
                position_embedding,
                blocks,
                final_norm,
                width,
            })
        })
    }

    pub fn config(&self) -> &TextConfig {
        &self.config
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.dims()[0]
    }

    pub fn token_table(&self) -> &Param {
        &self.token_embedding
    }

    pub fn position_table(&self) -> &Param {
        &self.position_embedding
    }

    /// Looks up a batch of equal-length sequences. Text positions start after
    /// the style slots when `style_slots` is set.
    pub fn embed_batch(&self, tokens: &[TokenSequence], style_slots: bool) -> Result<TextEmbedding> {
        let len = tokens.first().map(|t| t.len()).unwrap_or(0);
        if tokens.iter().any(|t| t.len() != len) {
            return Err(Error::Shape("embed_batch needs equal-length sequences".into()));
        }
        let vocab = self.vocab_size() as u32;
        let mut ids = Vec::with_capacity(tokens.len() * len);
        for t in tokens {
            for &id in &t.ids {
                if id >= vocab {
                    return Err(Error::Lookup(format!("token id {id} outside vocabulary of {vocab}")));
                }
                ids.push(id);
            }
        }
        let offset = if style_slots { STYLE_TOKENS } else { 0 };
        if offset + len > self.config.max_positions() {
            return Err(Error::Length(format!(
                "{len} text tokens exceed the positional table ({} slots)",
                self.config.max_positions()
            )));
        }
        let table = self.token_embedding.get();
        let idx = Tensor::from_vec(ids, tokens.len() * len, table.device())?;
        let rows = table.index_select(&idx, 0)?.reshape((tokens.len(), len, self.width))?;
        let pos = self.position_embedding.get().narrow(0, offset, len)?;
        Ok(TextEmbedding {
            vectors: rows.broadcast_add(&pos)?,
            style_slots,
        })
    }

    pub fn embed_tokens(&self, tokens: &TokenSequence, style_slots: bool) -> Result<TextEmbedding> {
        self.embed_batch(std::slice::from_ref(tokens), style_slots)
    }

    /// Runs `[style ; text]` (style `(B, 9, d)`) or `[text]` through the encoder.
    pub fn encode(&self, style: Option<&Tensor>, text: &TextEmbedding) -> Result<EncodedContext> {
        let (batch, text_len, width) = text.vectors.dims3()?;
        if width != self.width {
            return Err(Error::Shape(format!("text width {width} vs encoder width {}", self.width)));
        }
        let seq = match style {
            Some(s) => {
                let (sb, sl, sw) = s.dims3()?;
                if sl != STYLE_TOKENS || sw != self.width || sb != batch {
                    return Err(Error::Shape(format!(
                        "style tokens of shape {:?}, expected ({batch}, {STYLE_TOKENS}, {})",
                        s.dims(),
                        self.width
                    )));
                }
                if !text.style_slots {
                    return Err(Error::State("text embedded without style slot offsets".into()));
                }
                let pos = self.position_embedding.get().narrow(0, 0, STYLE_TOKENS)?;
                let s = s.broadcast_add(&pos)?;
                Tensor::cat(&[&s, &text.vectors], 1)?
            }
            None => text.vectors.clone(),
        };
        let style_len = if style.is_some() { STYLE_TOKENS } else { 0 };
        if style_len + text_len > self.config.max_positions() {
            return Err(Error::Length(format!(
                "combined length {} exceeds encoder maximum {}",
                style_len + text_len,
                self.config.max_positions()
            )));
        }
        let mut x = seq;
        for block in &self.blocks {
            x = block.forward(&x, self.config.heads)?;
        }
        EncodedContext::new(self.final_norm.forward(&x)?, style_len)
    }
}
