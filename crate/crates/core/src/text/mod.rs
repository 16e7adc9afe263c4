//! Prompt tokenization, token embedding and joint style+text contextualization.

mod encoder;
mod tokenizer;

pub use encoder::{TextConfig, TextEmbedding, TextEncoder};
pub use tokenizer::{split_words, TokenSequence, Tokenizer, BOS_ID, EOS_ID, PAD_ID};

use candle_core::Tensor;

use crate::error::{Error, Result};

/// Number of style slots prepended to the text sequence.
pub const STYLE_TOKENS: usize = 9;

/// Output of the text encoder over `[style ; text]` or `[text]`.
///
/// Style slots, when present, always occupy the first [`STYLE_TOKENS`]
/// positions.
#[derive(Debug, Clone)]
pub struct EncodedContext {
    hidden: Tensor,
    style_len: usize,
}

impl EncodedContext {
    /// `hidden` is `(B, S, d)`; `style_len` must be 0 or [`STYLE_TOKENS`].
    pub fn new(hidden: Tensor, style_len: usize) -> Result<Self> {
        let (_, seq, _) = hidden.dims3()?;
        if style_len != 0 && style_len != STYLE_TOKENS {
            return Err(Error::Shape(format!("style slot count must be 0 or {STYLE_TOKENS}, got {style_len}")));
        }
        if seq < style_len {
            return Err(Error::Shape(format!("context of length {seq} cannot hold {style_len} style slots")));
        }
        Ok(Self { hidden, style_len })
    }

    pub fn hidden(&self) -> &Tensor {
        &self.hidden
    }

    pub fn style_len(&self) -> usize {
        self.style_len
    }

    pub fn has_style(&self) -> bool {
        self.style_len > 0
    }

    pub fn batch(&self) -> usize {
        self.hidden.dims()[0]
    }

    pub fn len(&self) -> usize {
        self.hidden.dims()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.hidden.dims()[2]
    }

    /// Style encodings `(B, 9, d)`, absent for unconditional contexts.
    pub fn e_sty(&self) -> Result<Option<Tensor>> {
        if self.style_len == 0 {
            return Ok(None);
        }
        Ok(Some(self.hidden.narrow(1, 0, self.style_len)?))
    }

    /// Text encodings `(B, L, d)`.
    pub fn e_txt(&self) -> Result<Tensor> {
        Ok(self.hidden.narrow(1, self.style_len, self.len() - self.style_len)?)
    }

    pub fn style_mask(&self) -> Vec<bool> {
        (0..self.len()).map(|i| i < self.style_len).collect()
    }

    /// Repeats a batch-1 context `n` times along the batch axis.
    pub fn repeat(&self, n: usize) -> Result<Self> {
        if self.batch() != 1 {
            return Err(Error::Shape("only batch-1 contexts can be repeated".into()));
        }
        let hidden = self.hidden.repeat((n, 1, 1))?;
        Self::new(hidden, self.style_len)
    }

    pub fn detach(&self) -> Self {
        Self {
            hidden: self.hidden.detach(),
            style_len: self.style_len,
        }
    }
}
