//! Finetune residual sidecar: one `Δh` vector per adapted projection.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::archive::{read_archive, write_archive};
use crate::error::{Error, Result};

pub const SIDECAR_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualMeta {
    /// Content hashes of the references the residual was fitted to.
    pub style_hashes: Vec<String>,
    pub steps: usize,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneResidual {
    /// Keyed by projection path, e.g. `unet.mid.attn.cross.to_k`.
    pub vectors: BTreeMap<String, Tensor>,
    pub meta: ResidualMeta,
}

impl FinetuneResidual {
    pub fn parameter_count(&self) -> usize {
        self.vectors.values().map(|t| t.elem_count()).sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("format_version".into(), SIDECAR_VERSION.into());
        meta.insert("residual".into(), serde_json::to_string(&self.meta)?);
        write_archive(path.as_ref(), &self.vectors, meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let archive = read_archive(path.as_ref())?;
        let version = archive.meta("format_version")?;
        if version != SIDECAR_VERSION {
            return Err(Error::Version(format!("sidecar version {version}, expected {SIDECAR_VERSION}")));
        }
        let meta = serde_json::from_str(archive.meta("residual")?)?;
        for (k, v) in &archive.tensors {
            if v.rank() != 1 {
                return Err(Error::Load(format!("{k}: residual must be a vector, got {:?}", v.dims())));
            }
        }
        Ok(Self {
            vectors: archive.tensors,
            meta,
        })
    }
}
