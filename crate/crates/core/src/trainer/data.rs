//! Line-delimited JSON manifests of captioned images.

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::{load_rgb, resize_shorter_center_crop};
use crate::model::Model;
use crate::style::{StyleEncoder, StyleStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_path: PathBuf,
    #[serde(default)]
    pub caption: String,
    /// Optional style label; ignored by training, used by evaluation tooling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
}

/// One `{"image_path": ..., "caption": ...}` object per line. Relative paths
/// resolve against the manifest's directory; blank lines are skipped.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

/// Words of the file stem, used when a caption is empty.
fn stem_caption(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().replace(['_', '-'], " "))
        .unwrap_or_default()
        .trim()
        .to_string()
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new("."));
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))?;
            if rec.image_path.is_relative() {
                rec.image_path = root.join(&rec.image_path);
            }
            if !rec.image_path.is_file() {
                return Err(Error::Manifest(format!(
                    "{}:{}: image {} does not exist",
                    path.display(),
                    i + 1,
                    rec.image_path.display()
                )));
            }
            if rec.caption.trim().is_empty() {
                rec.caption = stem_caption(&rec.image_path);
            }
            if rec.caption.trim().is_empty() {
                return Err(Error::Manifest(format!("{}:{}: empty caption", path.display(), i + 1)));
            }
            records.push(rec);
        }
        if records.is_empty() {
            return Err(Error::Manifest(format!("{}: no records", path.display())));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn captions(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.caption.as_str())
    }
}

/// Decoded training images with their cached style statistics.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `(3, S, S)` in `[0, 1]` at the model resolution.
    pub images: Vec<Tensor>,
    pub captions: Vec<String>,
    pub stats: Vec<StyleStats>,
}

impl Dataset {
    /// The feature network is fixed, so each record's statistics are computed
    /// once up front.
    pub fn load(manifest: &DatasetManifest, model: &Model) -> Result<Self> {
        let size = model.image_size();
        let encoder = model.style_encoder();
        let mut images = Vec::with_capacity(manifest.records.len());
        let mut stats = Vec::with_capacity(manifest.records.len());
        let mut pending = Vec::new();
        for rec in &manifest.records {
            let raw = load_rgb(&rec.image_path)?;
            images.push(resize_shorter_center_crop(&raw, size)?);
            pending.push(encoder.prepare(&raw)?);
            if pending.len() == 16 {
                stats.extend(batch_statistics(encoder, &pending)?);
                pending.clear();
            }
        }
        if !pending.is_empty() {
            stats.extend(batch_statistics(encoder, &pending)?);
        }
        Ok(Self {
            images,
            captions: manifest.records.iter().map(|r| r.caption.clone()).collect(),
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn batch_statistics(encoder: &StyleEncoder, prepared: &[Tensor]) -> Result<Vec<StyleStats>> {
    let batch = Tensor::cat(prepared, 0)?;
    let pyramid = encoder.extract_multilevel_features(&batch)?;
    (0..prepared.len())
        .map(|i| StyleEncoder::pyramid_statistics(&pyramid, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_resolves_paths_and_falls_back_on_captions() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::zeros((3, 4, 4), candle_core::DType::F32, &candle_core::Device::Cpu).unwrap();
        crate::image_io::save_png(dir.path().join("red_circle.png"), &img, &[]).unwrap();
        let m = dir.path().join("m.jsonl");
        std::fs::write(&m, "{\"image_path\":\"red_circle.png\",\"caption\":\"\"}\n\n").unwrap();
        let man = DatasetManifest::load(&m).unwrap();
        assert_eq!(man.records[0].caption, "red circle");
        assert!(man.records[0].image_path.is_absolute() || man.records[0].image_path.starts_with(dir.path()));
    }

    #[test]
    fn missing_image_is_a_manifest_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.jsonl");
        std::fs::write(&m, "{\"image_path\":\"nope.png\",\"caption\":\"x\"}\n").unwrap();
        assert!(matches!(DatasetManifest::load(&m), Err(Error::Manifest(_))));
        std::fs::write(&m, "not json\n").unwrap();
        assert!(matches!(DatasetManifest::load(&m), Err(Error::Manifest(_))));
    }
}
