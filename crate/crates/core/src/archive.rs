//! Named tensor archives with string metadata (safetensors on disk).

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::{Dtype, SafeTensors, View};

use crate::error::{Error, Result};
use crate::params::tensor_bytes;

struct Entry {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &Entry {
    fn dtype(&self) -> Dtype {
        self.dtype
    }

    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }

    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

fn entry(t: &Tensor) -> Result<Entry> {
    let dtype = match t.dtype() {
        DType::F32 => Dtype::F32,
        DType::F64 => Dtype::F64,
        other => return Err(Error::Format(format!("unsupported archive dtype {other:?}"))),
    };
    Ok(Entry {
        dtype,
        shape: t.dims().to_vec(),
        bytes: tensor_bytes(t)?,
    })
}

pub fn write_archive(path: &Path, tensors: &BTreeMap<String, Tensor>, metadata: HashMap<String, String>) -> Result<()> {
    let entries = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), entry(t)?)))
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(entries.iter().map(|(k, e)| (k.as_str(), e)), Some(metadata))
        .map_err(|e| Error::Format(format!("archive encode: {e}")))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub struct Archive {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: HashMap<String, String>,
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |e: safetensors::SafeTensorError| Error::Load(format!("{}: corrupt archive: {e}", path.display()));
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(corrupt)?;
    let st = SafeTensors::deserialize(&bytes).map_err(corrupt)?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        let t = match view.dtype() {
            Dtype::F32 => {
                let v: Vec<f32> = view.data().chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, view.shape(), &Device::Cpu)?
            }
            Dtype::F64 => {
                let v: Vec<f64> = view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, view.shape(), &Device::Cpu)?
            }
            other => return Err(Error::Load(format!("{name}: unsupported dtype {other:?}"))),
        };
        tensors.insert(name, t);
    }
    Ok(Archive {
        tensors,
        metadata: meta.metadata().clone().unwrap_or_default(),
    })
}

impl Archive {
    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Load(format!("archive metadata lacks `{key}`")))
    }
}
