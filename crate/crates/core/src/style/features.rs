//! Fixed feature network whose rectified activations feed the style statistics.

use std::path::PathBuf;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv2d, max_pool2x, Builder, Conv2d};

/// Which fixed network produces the three taps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureNetSpec {
    /// VGG-style stack with fixed-seed random weights and taps of the given widths.
    RandomVgg { seed: u64, widths: [usize; 3] },
    /// VGG-16 `features` weights (torchvision naming) from a safetensors file;
    /// taps at relu3_3, relu4_3 and relu5_3.
    Vgg16 { weights: PathBuf },
}

impl Default for FeatureNetSpec {
    fn default() -> Self {
        FeatureNetSpec::RandomVgg {
            seed: 0x5eed,
            widths: [128, 256, 512],
        }
    }
}

/// Rectified activations of the low, mid and high taps, channels-last.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub low: Tensor,
    pub mid: Tensor,
    pub high: Tensor,
}

impl FeaturePyramid {
    pub fn levels(&self) -> [&Tensor; 3] {
        [&self.low, &self.mid, &self.high]
    }

    pub fn channels(&self) -> [usize; 3] {
        self.levels().map(|t| *t.dims().last().unwrap())
    }
}

#[derive(Debug, Clone)]
enum Layer {
    ConvRelu(Conv2d),
    Pool,
}

#[derive(Debug, Clone)]
pub struct FeatureNet {
    layers: Vec<Layer>,
    /// Indices into `layers` whose outputs are tapped.
    taps: [usize; 3],
}

/// ImageNet channel statistics used to normalize inputs.
const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const STD: [f32; 3] = [0.229, 0.224, 0.225];

enum Plan {
    Conv(usize),
    Pool,
    Tap,
}

impl FeatureNet {
    pub fn new(b: &mut Builder, spec: &FeatureNetSpec) -> Result<Self> {
        match spec {
            FeatureNetSpec::RandomVgg { seed, widths } => {
                // Own initializer so the network depends only on its seed.
                let mut init = crate::nn::Init::new(*seed, b.init.dtype());
                let mut sub = Builder::new(b.registry, &mut init, b.group());
                let w = *widths;
                let plan = [
                    Plan::Conv((w[0] / 4).max(1)),
                    Plan::Pool,
                    Plan::Conv((w[0] / 2).max(1)),
                    Plan::Pool,
                    Plan::Conv(w[0]),
                    Plan::Tap,
                    Plan::Pool,
                    Plan::Conv(w[1]),
                    Plan::Tap,
                    Plan::Pool,
                    Plan::Conv(w[2]),
                    Plan::Tap,
                ];
                let prefix = b.path("features");
                sub.scoped(&prefix, |sb| Self::from_plan(sb, &plan))
            }
            FeatureNetSpec::Vgg16 { weights } => {
                let plan = [
                    Plan::Conv(64),
                    Plan::Conv(64),
                    Plan::Pool,
                    Plan::Conv(128),
                    Plan::Conv(128),
                    Plan::Pool,
                    Plan::Conv(256),
                    Plan::Conv(256),
                    Plan::Conv(256),
                    Plan::Tap,
                    Plan::Pool,
                    Plan::Conv(512),
                    Plan::Conv(512),
                    Plan::Conv(512),
                    Plan::Tap,
                    Plan::Pool,
                    Plan::Conv(512),
                    Plan::Conv(512),
                    Plan::Conv(512),
                    Plan::Tap,
                ];
                let net = b.scoped("features", |b| Self::from_plan(b, &plan))?;
                net.load_torchvision(b, weights)?;
                Ok(net)
            }
        }
    }

    fn from_plan(b: &mut Builder, plan: &[Plan]) -> Result<Self> {
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        let mut c = 3;
        for p in plan {
            match p {
                Plan::Conv(out) => {
                    let conv = Conv2d::new(b, &format!("{}", layers.len()), c, *out, 3, 1)?;
                    layers.push(Layer::ConvRelu(conv));
                    c = *out;
                }
                Plan::Pool => layers.push(Layer::Pool),
                Plan::Tap => taps.push(layers.len() - 1),
            }
        }
        let taps: [usize; 3] = taps
            .try_into()
            .map_err(|_| Error::Config("feature net needs exactly three taps".into()))?;
        Ok(Self { layers, taps })
    }

    /// Loads torchvision-layout `features.{i}.weight/bias` tensors.
    fn load_torchvision(&self, b: &Builder, path: &std::path::Path) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, &candle_core::Device::Cpu)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        // torchvision numbers every module, ReLUs and pools included.
        let mut torch_idx = 0;
        for layer in &self.layers {
            match layer {
                Layer::ConvRelu(conv) => {
                    let w = tensors
                        .get(&format!("features.{torch_idx}.weight"))
                        .ok_or_else(|| Error::Key(format!("features.{torch_idx}.weight missing")))?;
                    let bias = tensors
                        .get(&format!("features.{torch_idx}.bias"))
                        .ok_or_else(|| Error::Key(format!("features.{torch_idx}.bias missing")))?;
                    b.registry.assign(conv.weight.name(), &w.permute((2, 3, 1, 0))?.contiguous()?)?;
                    b.registry.assign(conv.bias.name(), bias)?;
                    torch_idx += 2;
                }
                Layer::Pool => torch_idx += 1,
            }
        }
        Ok(())
    }

    pub fn tap_channels(&self) -> [usize; 3] {
        self.taps.map(|i| match &self.layers[i] {
            Layer::ConvRelu(c) => c.c_out(),
            Layer::Pool => unreachable!("taps follow convolutions"),
        })
    }

    /// Number of 2x poolings before the last tap.
    pub fn downsampling(&self) -> usize {
        self.layers[..self.taps[2]]
            .iter()
            .filter(|l| matches!(l, Layer::Pool))
            .count()
    }

    /// Normalizes `(B, 3, S, S)` images in `[0, 1]` and runs the net to the last tap.
    pub fn forward(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::Format(format!("feature net expects RGB input, got {c} channels")));
        }
        let factor = 1 << self.downsampling();
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Shape(format!("input {h}x{w} not divisible by {factor}")));
        }
        let dtype = match &self.layers[0] {
            Layer::ConvRelu(c) => c.weight.var().dtype(),
            Layer::Pool => DType::F32,
        };
        let dev = images.device();
        let mean = Tensor::new(&MEAN, dev)?.reshape((1, 1, 1, 3))?;
        let std = Tensor::new(&STD, dev)?.reshape((1, 1, 1, 3))?;
        let x = images.to_dtype(DType::F32)?.permute((0, 2, 3, 1))?;
        let mut x = x.broadcast_sub(&mean)?.broadcast_div(&std)?.to_dtype(dtype)?.detach();
        let mut outs = Vec::with_capacity(3);
        for (i, layer) in self.layers.iter().enumerate().take(self.taps[2] + 1) {
            x = match layer {
                Layer::ConvRelu(conv) => {
                    conv2d(&x, &conv.weight.get(), &conv.bias.get(), 1, 1)?.relu()?
                }
                Layer::Pool => max_pool2x(&x)?,
            };
            if self.taps.contains(&i) {
                outs.push(x.clone());
            }
        }
        let mut it = outs.into_iter();
        Ok(FeaturePyramid {
            low: it.next().unwrap(),
            mid: it.next().unwrap(),
            high: it.next().unwrap(),
        })
    }
}
