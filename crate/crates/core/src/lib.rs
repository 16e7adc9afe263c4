//! Hierarchical style adapters for a small pixel-space text-to-image
//! diffusion model.
//!
//! A fixed feature network summarizes a style reference as channel statistics
//! at three depths; per-level networks turn them into nine style tokens that
//! are prepended to the prompt and contextualized by the frozen text encoder.
//! Inside every cross-attention layer the key and value projections receive a
//! low-rank residual at the style positions only. A train-only content adapter
//! and a per-style finetune residual complete the picture.

pub mod aca;
pub mod adaptation;
mod archive;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod image_io;
pub mod model;
pub mod nn;
pub mod params;
pub mod residual;
pub mod sampler;
pub mod style;
pub mod text;
pub mod toy;
pub mod trainer;

pub use aca::{augment_content, gate_aca, AcaConfig, AugmentPolicy, ContentAdapter};
pub use adaptation::{AdaptedProjection, CrossAttention, ProjectionKind};
pub use backbone::{AcaFeatures, DiffusionConfig, NoiseSchedule, NoisyLatent, UNet};
pub use checkpoint::{load_checkpoint, save_checkpoint, TrainMetadata};
pub use error::{Error, Result};
pub use eval::{evaluate_testset, style_similarity, EvalReport, StyleScorer, TestSet};
pub use model::{Model, ModelConfig, ParamGroup, Phase, Preset};
pub use params::{Group, Param, ParamRegistry};
pub use residual::{FinetuneResidual, ResidualMeta};
pub use sampler::{cfg_combine, ddim_sample, generate, generate_mixed, generate_with_embedding, Generated, SampleOptions};
pub use style::{
    average_style_embeddings, channel_statistics, mix_style_embeddings, FeatureNetSpec, FeaturePyramid, StatVector,
    StyleConfig, StyleEmbedding, StyleEncoder,
};
pub use text::{EncodedContext, TextConfig, TextEmbedding, TextEncoder, TokenSequence, Tokenizer};
pub use trainer::{fast_finetune, train, training_loss, Dataset, DatasetManifest, FinetuneOptions, TrainConfig};
