use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
const BYTE_BASE: u32 = 3;
const WORD_BASE: u32 = BYTE_BASE + 256;

/// Token ids of one prompt, `BOS ... EOS`, optionally followed by padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Right-pads with [`PAD_ID`] up to `len` (no-op when already longer).
    pub fn padded(&self, len: usize) -> TokenSequence {
        let mut ids = self.ids.clone();
        if ids.len() < len {
            ids.resize(len, PAD_ID);
        }
        TokenSequence { ids }
    }
}

/// Word-level tokenizer over a fixed vocabulary with UTF-8 byte fallback.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
    max_tokens: usize,
}

/// Lowercased alphanumeric runs; every other non-space char is its own piece.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl Tokenizer {
    /// Vocabulary = sorted distinct words of `captions`.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>, max_tokens: usize) -> Self {
        let words: BTreeSet<String> = captions.into_iter().flat_map(split_words).collect();
        Self::from_words(words.into_iter().collect(), max_tokens).expect("distinct words")
    }

    pub fn from_words(words: Vec<String>, max_tokens: usize) -> Result<Self> {
        if max_tokens < 2 {
            return Err(Error::Config("max_tokens must leave room for BOS and EOS".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), WORD_BASE + i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry `{w}`")));
            }
        }
        Ok(Self {
            words,
            index,
            max_tokens,
        })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    pub fn vocab_size(&self) -> usize {
        WORD_BASE as usize + self.words.len()
    }

    pub fn tokenize(&self, prompt: &str) -> TokenSequence {
        let mut ids = vec![BOS_ID];
        for word in split_words(prompt) {
            match self.index.get(&word) {
                Some(&id) => ids.push(id),
                None => ids.extend(word.bytes().map(|b| BYTE_BASE + b as u32)),
            }
        }
        ids.truncate(self.max_tokens - 1);
        ids.push(EOS_ID);
        TokenSequence { ids }
    }

    /// Tokenized and padded to exactly `max_tokens`.
    pub fn tokenize_padded(&self, prompt: &str) -> TokenSequence {
        self.tokenize(prompt).padded(self.max_tokens)
    }
}
