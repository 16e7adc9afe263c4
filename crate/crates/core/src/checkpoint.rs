//! Checkpoint archive: every trained parameter plus configuration,
//! vocabulary and training metadata.
//!
//! The fixed feature network is rebuilt from its seed on load and verified
//! against the recorded hash instead of being stored.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{read_archive, write_archive};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{tensor_bytes, Group};
use crate::text::Tokenizer;

pub const CHECKPOINT_VERSION: &str = "1";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMetadata {
    pub pretrain_steps: u64,
    pub adapter_steps: u64,
    pub seed: u64,
    /// Hash of the resolved training configuration.
    pub config_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Vocabulary {
    words: Vec<String>,
    max_tokens: usize,
}

fn stored(group: Group) -> bool {
    !matches!(group, Group::FeatureNet | Group::Residual)
}

fn content_hash(tensors: &BTreeMap<String, candle_core::Tensor>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(tensor_bytes(t)?);
    }
    Ok(hex::encode(h.finalize()))
}

/// Per-group hashes of a model, keyed by group name.
pub fn group_hashes(model: &Model) -> Result<BTreeMap<String, String>> {
    Group::ALL
        .iter()
        .filter(|g| **g != Group::Residual)
        .map(|g| Ok((g.name().to_string(), model.registry().group_hash(*g)?)))
        .collect()
}

pub fn save_checkpoint(model: &Model, meta: &TrainMetadata, path: impl AsRef<Path>) -> Result<()> {
    let tensors: BTreeMap<_, _> = model
        .registry()
        .snapshot()
        .into_iter()
        .filter(|(_, g, _)| stored(*g))
        .map(|(n, _, t)| (n, t))
        .collect();
    let vocab = Vocabulary {
        words: model.tokenizer().words().to_vec(),
        max_tokens: model.tokenizer().max_tokens(),
    };
    let mut info = HashMap::new();
    info.insert("format_version".to_string(), CHECKPOINT_VERSION.to_string());
    info.insert("model_config".into(), serde_json::to_string(model.config())?);
    info.insert("vocabulary".into(), serde_json::to_string(&vocab)?);
    info.insert("train".into(), serde_json::to_string(meta)?);
    info.insert("group_hashes".into(), serde_json::to_string(&group_hashes(model)?)?);
    info.insert("content_hash".into(), content_hash(&tensors)?);
    write_archive(path.as_ref(), &tensors, info)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, TrainMetadata)> {
    let path = path.as_ref();
    let archive = read_archive(path)?;
    let version = archive.meta("format_version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(format!(
            "{}: checkpoint version {version}, expected {CHECKPOINT_VERSION}",
            path.display()
        )));
    }
    let recorded = archive.meta("content_hash")?;
    let actual = content_hash(&archive.tensors)?;
    if recorded != actual {
        return Err(Error::Integrity(format!(
            "{}: content hash {actual} does not match recorded {recorded}",
            path.display()
        )));
    }
    let config: ModelConfig = serde_json::from_str(archive.meta("model_config")?)?;
    let vocab: Vocabulary = serde_json::from_str(archive.meta("vocabulary")?)?;
    let meta: TrainMetadata = serde_json::from_str(archive.meta("train")?)?;
    let hashes: BTreeMap<String, String> = serde_json::from_str(archive.meta("group_hashes")?)?;
    let model = Model::new(config, Tokenizer::from_words(vocab.words, vocab.max_tokens)?)?;
    let registry = model.registry();
    let expected: Vec<String> = registry
        .snapshot()
        .into_iter()
        .filter(|(_, g, _)| stored(*g))
        .map(|(n, _, _)| n)
        .collect();
    for name in &expected {
        let t = archive
            .tensors
            .get(name)
            .ok_or_else(|| Error::Key(format!("{}: checkpoint lacks parameter `{name}`", path.display())))?;
        registry.assign(name, t)?;
    }
    if let Some(extra) = archive.tensors.keys().find(|k| !expected.contains(k)) {
        return Err(Error::Key(format!("{}: unknown parameter `{extra}`", path.display())));
    }
    for (group, hash) in &hashes {
        let g = Group::from_name(group).ok_or_else(|| Error::Load(format!("unknown group `{group}`")))?;
        let now = registry.group_hash(g)?;
        if &now != hash {
            return Err(Error::Integrity(format!(
                "{}: {group} parameters hash to {now}, checkpoint recorded {hash}",
                path.display()
            )));
        }
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model {
        let tok = Tokenizer::build(["a red circle", "a blue square"], 12);
        Model::new(ModelConfig::micro(), tok).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        let meta = TrainMetadata {
            adapter_steps: 3,
            seed: 9,
            ..Default::default()
        };
        save_checkpoint(&m, &meta, &path).unwrap();
        let (back, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(m.registry().full_hash().unwrap(), back.registry().full_hash().unwrap());
        assert_eq!(m.tokenizer().words(), back.tokenizer().words());
    }

    #[test]
    fn tampered_archive_fails_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model(), &TrainMetadata::default(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn truncated_archive_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model(), &TrainMetadata::default(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Load(_))));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        let tensors: BTreeMap<_, _> = m.registry().snapshot().into_iter().map(|(n, _, t)| (n, t)).take(1).collect();
        let mut info = HashMap::new();
        info.insert("format_version".to_string(), "0".to_string());
        write_archive(&path, &tensors, info).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Version(_))));
    }
}
