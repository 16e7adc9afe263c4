use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::text::STYLE_TOKENS;

pub const LEVELS: usize = 3;
pub const TOKENS_PER_LEVEL: usize = 3;

/// Nine style tokens ordered `[low x3, mid x3, high x3]`.
///
/// `sources[l]` names the reference that produced level `l`.
#[derive(Debug, Clone)]
pub struct StyleEmbedding {
    tokens: Tensor,
    sources: [String; LEVELS],
}

impl StyleEmbedding {
    pub fn new(tokens: Tensor, source: impl Into<String>) -> Result<Self> {
        let s = source.into();
        Self::with_sources(tokens, [s.clone(), s.clone(), s])
    }

    pub fn with_sources(tokens: Tensor, sources: [String; LEVELS]) -> Result<Self> {
        let (n, _) = tokens.dims2()?;
        if n != STYLE_TOKENS {
            return Err(Error::Shape(format!("style embedding needs {STYLE_TOKENS} tokens, got {n}")));
        }
        Ok(Self {
            tokens: tokens.detach(),
            sources,
        })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn width(&self) -> usize {
        self.tokens.dims()[1]
    }

    /// The three tokens of level `level` (0 = low, 1 = mid, 2 = high).
    pub fn level(&self, level: usize) -> Result<Tensor> {
        if level >= LEVELS {
            return Err(Error::Argument(format!("level {level} out of range")));
        }
        Ok(self.tokens.narrow(0, level * TOKENS_PER_LEVEL, TOKENS_PER_LEVEL)?)
    }

    pub fn source_level_map(&self) -> &[String; LEVELS] {
        &self.sources
    }

    /// True when every level came from the same source.
    pub fn single_source(&self) -> bool {
        self.sources.iter().all(|s| *s == self.sources[0])
    }
}

/// Elementwise mean of the token matrices.
pub fn average_style_embeddings(refs: &[StyleEmbedding]) -> Result<StyleEmbedding> {
    let first = refs
        .first()
        .ok_or_else(|| Error::Argument("cannot average an empty list of style embeddings".into()))?;
    if refs.len() == 1 {
        return Ok(first.clone());
    }
    let mut sum = first.tokens.clone();
    for r in &refs[1..] {
        if r.tokens.dims() != first.tokens.dims() {
            return Err(Error::Argument(format!(
                "style embedding shapes differ: {:?} vs {:?}",
                r.tokens.dims(),
                first.tokens.dims()
            )));
        }
        sum = (sum + &r.tokens)?;
    }
    let mean = (sum / refs.len() as f64)?;
    let sources = std::array::from_fn(|l| {
        let names: Vec<&str> = refs.iter().map(|r| r.sources[l].as_str()).collect();
        if names.iter().all(|n| *n == names[0]) {
            names[0].to_string()
        } else {
            format!("mean({})", names.join("+"))
        }
    });
    StyleEmbedding::with_sources(mean, sources)
}

/// Level-wise selection: low tokens from `low`, mid from `mid`, high from `high`.
pub fn mix_style_embeddings(low: &StyleEmbedding, mid: &StyleEmbedding, high: &StyleEmbedding) -> Result<StyleEmbedding> {
    if low.tokens.dims() != mid.tokens.dims() || low.tokens.dims() != high.tokens.dims() {
        return Err(Error::Argument("mixing sources have different shapes".into()));
    }
    let tokens = Tensor::cat(&[low.level(0)?, mid.level(1)?, high.level(2)?], 0)?;
    StyleEmbedding::with_sources(
        tokens,
        [low.sources[0].clone(), mid.sources[1].clone(), high.sources[2].clone()],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use candle_core::DType;

    fn emb(seed: u64, name: &str) -> StyleEmbedding {
        let mut init = Init::new(seed, DType::F32);
        StyleEmbedding::new(init.normal(&[9, 4], 1.0).unwrap(), name).unwrap()
    }

    fn values(e: &StyleEmbedding) -> Vec<f32> {
        e.tokens().flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn averaging_duplicates_is_identity() {
        let e = emb(1, "a");
        assert_eq!(values(&average_style_embeddings(&[e.clone(), e.clone()]).unwrap()), values(&e));
    }

    #[test]
    fn averaging_opposites_is_zero() {
        let e = emb(2, "a");
        let neg = StyleEmbedding::new(e.tokens().neg().unwrap(), "b").unwrap();
        let avg = average_style_embeddings(&[e, neg]).unwrap();
        assert!(values(&avg).iter().all(|v| *v == 0.0));
        assert_eq!(avg.source_level_map()[0], "mean(a+b)");
    }

    #[test]
    fn averaging_matches_scalar_loop() {
        let (a, b) = (emb(3, "a"), emb(4, "b"));
        let avg = values(&average_style_embeddings(&[a.clone(), b.clone()]).unwrap());
        for ((m, x), y) in avg.iter().zip(values(&a)).zip(values(&b)) {
            assert!((m - (x + y) / 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_average_rejected() {
        assert!(matches!(average_style_embeddings(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn mixing_selects_levels() {
        let (a, b, c) = (emb(5, "a"), emb(6, "b"), emb(7, "c"));
        let m = mix_style_embeddings(&a, &b, &c).unwrap();
        let lv = |e: &StyleEmbedding, l| e.level(l).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(lv(&m, 0), lv(&a, 0));
        assert_eq!(lv(&m, 1), lv(&b, 1));
        assert_eq!(lv(&m, 2), lv(&c, 2));
        assert_eq!(m.source_level_map(), &["a".to_string(), "b".into(), "c".into()]);
        let self_mix = mix_style_embeddings(&a, &a, &a).unwrap();
        assert_eq!(values(&self_mix), values(&a));
    }

    #[test]
    fn mixing_shape_mismatch_rejected() {
        let mut init = Init::new(0, DType::F32);
        let other = StyleEmbedding::new(init.normal(&[9, 5], 1.0).unwrap(), "x").unwrap();
        let a = emb(1, "a");
        assert!(matches!(mix_style_embeddings(&a, &a, &other), Err(Error::Argument(_))));
    }
}
