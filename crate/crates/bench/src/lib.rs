//! Fixtures shared by the benchmarks.

use candle_core::{DType, Tensor};
use hstyle_core::nn::Init;
use hstyle_core::{Model, ModelConfig, Result, Tokenizer};

pub fn model(config: ModelConfig) -> Result<Model> {
    let tok = Tokenizer::build(["a circle on the left", "a square on the right"], config.text.max_text_tokens);
    Model::new(config, tok)
}

pub fn noise(shape: &[usize], seed: u64) -> Result<Tensor> {
    Init::new(seed, DType::F32).normal(shape, 1.0)
}
