use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

/// Per-channel spatial mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct StatVector {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StatVector {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `[means ; stds]`, length `2C`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.mean.clone();
        v.extend_from_slice(&self.std);
        v
    }
}

/// Statistics of one channels-last activation map `(H, W, C)` (or any
/// `(..., C)` layout: every leading axis counts as spatial).
///
/// The standard deviation divides by the number of spatial elements.
pub fn channel_statistics(activation: &Tensor) -> Result<StatVector> {
    let dims = activation.dims();
    let c = *dims.last().ok_or_else(|| Error::Shape("activation has no channel axis".into()))?;
    let n = activation.elem_count() / c.max(1);
    if c == 0 || n == 0 {
        return Err(Error::Shape(format!("activation {dims:?} has an empty spatial extent")));
    }
    let x = activation.to_dtype(DType::F64)?.reshape((n, c))?;
    let mean = x.mean_keepdim(0)?;
    let var = x.broadcast_sub(&mean)?.sqr()?.mean(0)?;
    let mean = mean.squeeze(0)?.to_vec1::<f64>()?;
    let std = var.to_vec1::<f64>()?.into_iter().map(|v| v.max(0.0).sqrt()).collect();
    Ok(StatVector { mean, std })
}

/// Per-image statistics of a batched channels-last map `(B, H, W, C)`.
pub fn channel_statistics_batch(activation: &Tensor) -> Result<Vec<StatVector>> {
    let b = activation.dim(0)?;
    (0..b).map(|i| channel_statistics(&activation.get(i)?)).collect()
}
