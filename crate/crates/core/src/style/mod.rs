//! Multi-level style encoding: fixed-network taps, channel statistics and the
//! per-level projection networks that emit the nine style tokens.

mod embedding;
mod features;
mod stats;

pub use embedding::{average_style_embeddings, mix_style_embeddings, StyleEmbedding, LEVELS, TOKENS_PER_LEVEL};
pub use features::{FeatureNet, FeatureNetSpec, FeaturePyramid};
pub use stats::{channel_statistics, channel_statistics_batch, StatVector};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::{check_rgb, image_hash, resize_shorter_center_crop};
use crate::nn::{gelu, Builder, Linear};
use crate::params::Group;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleConfig {
    /// Side of the square crop fed to the feature network.
    pub input_size: usize,
    pub feature_net: FeatureNetSpec,
    pub mlp_hidden: usize,
}

impl Default for StyleConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            feature_net: FeatureNetSpec::default(),
            mlp_hidden: 512,
        }
    }
}

/// Statistics of the three taps for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleStats {
    pub levels: [StatVector; LEVELS],
}

impl StyleStats {
    /// All levels concatenated, `[low ; mid ; high]`.
    pub fn concat(&self) -> Vec<f64> {
        self.levels.iter().flat_map(|l| l.to_vec()).collect()
    }
}

#[derive(Debug, Clone)]
struct LevelMlp {
    fc1: Linear,
    fc2: Linear,
}

impl LevelMlp {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&gelu(&self.fc1.forward(x)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct StyleEncoder {
    config: StyleConfig,
    feature_net: FeatureNet,
    mlps: Vec<LevelMlp>,
    width: usize,
}

impl StyleEncoder {
    /// Feature net lands in [`Group::FeatureNet`], the level networks in
    /// [`Group::StyleEncoder`] with a zeroed output layer.
    pub fn new(b: &mut Builder, config: &StyleConfig, width: usize) -> Result<Self> {
        b.scoped("style", |b| {
            let feature_net = b.grouped(Group::FeatureNet, |b| FeatureNet::new(b, &config.feature_net))?;
            let channels = feature_net.tap_channels();
            let mlps = b.grouped(Group::StyleEncoder, |b| {
                ["low", "mid", "high"]
                    .iter()
                    .zip(channels)
                    .map(|(name, c)| {
                        b.scoped(&format!("mlp.{name}"), |b| {
                            Ok(LevelMlp {
                                fc1: Linear::new(b, "fc1", 2 * c, config.mlp_hidden, true)?,
                                fc2: Linear::zeroed(b, "fc2", config.mlp_hidden, TOKENS_PER_LEVEL * width, true)?,
                            })
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            Ok(Self {
                config: config.clone(),
                feature_net,
                mlps,
                width,
            })
        })
    }

    pub fn config(&self) -> &StyleConfig {
        &self.config
    }

    pub fn feature_net(&self) -> &FeatureNet {
        &self.feature_net
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Resize/crop an RGB image `(3, H, W)` in `[0, 1]` to the network input, `(1, 3, S, S)`.
    pub fn prepare(&self, image: &Tensor) -> Result<Tensor> {
        check_rgb(image)?;
        Ok(resize_shorter_center_crop(image, self.config.input_size)?.unsqueeze(0)?)
    }

    /// Tap activations of prepared images `(B, 3, S, S)`.
    pub fn extract_multilevel_features(&self, prepared: &Tensor) -> Result<FeaturePyramid> {
        self.feature_net.forward(prepared)
    }

    pub fn statistics(&self, image: &Tensor) -> Result<StyleStats> {
        let pyramid = self.extract_multilevel_features(&self.prepare(image)?)?;
        Self::pyramid_statistics(&pyramid, 0)
    }

    pub fn pyramid_statistics(pyramid: &FeaturePyramid, index: usize) -> Result<StyleStats> {
        let [low, mid, high] = pyramid.levels();
        Ok(StyleStats {
            levels: [
                channel_statistics(&low.get(index)?)?,
                channel_statistics(&mid.get(index)?)?,
                channel_statistics(&high.get(index)?)?,
            ],
        })
    }

    /// Style tokens `(B, 9, d)` for a batch of statistics; gradient flows into
    /// the level networks when their group is live.
    pub fn encode_stats(&self, stats: &[&StyleStats]) -> Result<Tensor> {
        if stats.is_empty() {
            return Err(Error::Argument("no statistics to encode".into()));
        }
        let dtype = self.mlps[0].fc1.weight.var().dtype();
        let mut levels = Vec::with_capacity(LEVELS);
        for (l, mlp) in self.mlps.iter().enumerate() {
            let expect = mlp.fc1.d_in();
            let mut rows = Vec::with_capacity(stats.len() * expect);
            for s in stats {
                let v = s.levels[l].to_vec();
                if v.len() != expect {
                    return Err(Error::Config(format!(
                        "level {l} statistics have length {}, network expects {expect}",
                        v.len()
                    )));
                }
                rows.extend(v);
            }
            let x = Tensor::from_vec(rows, (stats.len(), expect), &Device::Cpu)?.to_dtype(dtype)?;
            let tokens = mlp.forward(&x)?.reshape((stats.len(), TOKENS_PER_LEVEL, self.width))?;
            levels.push(tokens);
        }
        Ok(Tensor::cat(&levels, 1)?)
    }

    pub fn embed_stats(&self, stats: &StyleStats, source: impl Into<String>) -> Result<StyleEmbedding> {
        let tokens = self.encode_stats(&[stats])?.squeeze(0)?;
        StyleEmbedding::new(tokens, source)
    }

    /// Style embedding of one RGB image; provenance is the image content hash.
    pub fn encode_style(&self, image: &Tensor) -> Result<StyleEmbedding> {
        let stats = self.statistics(image)?;
        self.embed_stats(&stats, image_hash(image)?)
    }

    pub fn zero_embedding(&self, dtype: DType) -> Result<StyleEmbedding> {
        StyleEmbedding::new(Tensor::zeros((9, self.width), dtype, &Device::Cpu)?, "null")
    }
}
