//! Proxy evaluation: style similarity from multi-level channel statistics and
//! optional text similarity from an external embedder process.
//!
//! The embedder is invoked as `sh -c '<cmd> "$1" "$2"' <image> <prompt>` and
//! must print one number on standard output.

use std::path::{Path, PathBuf};
use std::process::Command;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::load_rgb;
use crate::model::Model;
use crate::sampler::{generate, SampleOptions};

/// Per-dimension mean and scale over an evaluation batch.
#[derive(Debug, Clone)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    /// `None` for fewer than two vectors.
    pub fn from_batch(vectors: &[Vec<f64>]) -> Option<Self> {
        if vectors.len() < 2 {
            return None;
        }
        let dim = vectors[0].len();
        let n = vectors.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|k| vectors.iter().map(|v| v[k]).sum::<f64>() / n).collect();
        let scale = (0..dim)
            .map(|k| {
                let var = vectors.iter().map(|v| (v[k] - mean[k]).powi(2)).sum::<f64>() / n;
                // Constant dimensions carry no information; leave them unscaled.
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Some(Self { mean, scale })
    }
}

/// `1 / (1 + L2)` between two concatenated statistic vectors.
pub fn style_similarity(a: &[f64], b: &[f64], standardizer: Option<&Standardizer>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("statistics of length {} vs {}", a.len(), b.len())));
    }
    let d2: f64 = match standardizer {
        Some(s) => a
            .iter()
            .zip(b)
            .enumerate()
            .map(|(k, (x, y))| ((x - s.mean[k]) / s.scale[k] - (y - s.mean[k]) / s.scale[k]).powi(2))
            .sum(),
        None => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum(),
    };
    Ok(1.0 / (1.0 + d2.sqrt()))
}

/// Statistics of a set of images with batch standardization.
#[derive(Debug, Clone)]
pub struct StyleScorer {
    stats: Vec<Vec<f64>>,
    standardizer: Option<Standardizer>,
}

impl StyleScorer {
    pub fn new(model: &Model, images: &[Tensor]) -> Result<Self> {
        let stats = images
            .iter()
            .map(|img| Ok(model.style_encoder().statistics(img)?.concat()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_stats(stats))
    }

    pub fn from_stats(stats: Vec<Vec<f64>>) -> Self {
        let standardizer = Standardizer::from_batch(&stats);
        Self { stats, standardizer }
    }

    pub fn standardized(&self) -> bool {
        self.standardizer.is_some()
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    pub fn score(&self, i: usize, j: usize) -> Result<f64> {
        let get = |k: usize| {
            self.stats
                .get(k)
                .ok_or_else(|| Error::Argument(format!("image index {k} outside batch of {}", self.stats.len())))
        };
        style_similarity(get(i)?, get(j)?, self.standardizer.as_ref())
    }

    /// Fraction of `(output, matching, mismatched)` triples where the output
    /// scores higher against its matching reference.
    pub fn ranking_accuracy(&self, triples: &[(usize, usize, usize)]) -> Result<f64> {
        if triples.is_empty() {
            return Err(Error::Argument("no triples to rank".into()));
        }
        let mut wins = 0;
        for &(o, m, x) in triples {
            if self.score(o, m)? > self.score(o, x)? {
                wins += 1;
            }
        }
        Ok(wins as f64 / triples.len() as f64)
    }
}

/// Prompts crossed with style references, as JSON
/// `{"prompts": [...], "styles": [...]}`; style paths resolve against the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSet {
    pub prompts: Vec<String>,
    pub styles: Vec<PathBuf>,
}

impl TestSet {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut set: TestSet =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let root = path.parent().unwrap_or(Path::new("."));
        for s in &mut set.styles {
            if s.is_relative() {
                *s = root.join(&*s);
            }
        }
        if set.prompts.is_empty() || set.styles.is_empty() {
            return Err(Error::Manifest(format!("{}: needs at least one prompt and one style", path.display())));
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub prompt: String,
    pub style_ref: String,
    pub image: String,
    pub style_score: f64,
    pub text_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregates {
    pub mean_style: f64,
    pub mean_text: Option<f64>,
    pub count: usize,
    pub text_count: usize,
}

impl EvalAggregates {
    pub fn from_rows(rows: &[EvalRow]) -> Self {
        let count = rows.len();
        let mean_style = if count == 0 {
            0.0
        } else {
            rows.iter().map(|r| r.style_score).sum::<f64>() / count as f64
        };
        let texts: Vec<f64> = rows.iter().filter_map(|r| r.text_score).collect();
        let mean_text = (!texts.is_empty()).then(|| texts.iter().sum::<f64>() / texts.len() as f64);
        Self {
            mean_style,
            mean_text,
            count,
            text_count: texts.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Describes the style metric; it is a statistics proxy, not CLIP.
    pub metric: String,
    /// Whether distances were standardized over the evaluation batch.
    pub standardized: bool,
    pub rows: Vec<EvalRow>,
    pub aggregates: EvalAggregates,
}

impl EvalReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Runs the external text-similarity command; `None` on any failure.
pub fn run_embedder(cmd: &str, image: &Path, prompt: &str) -> Option<f64> {
    let out = Command::new("sh")
        .arg("-c")
        .arg(format!("{cmd} \"$1\" \"$2\""))
        .arg("hstyle-embedder")
        .arg(image)
        .arg(prompt)
        .output()
        .ok()?;
    if !out.status.success() {
        log::warn!("embedder exited with {} for {}", out.status, image.display());
        return None;
    }
    String::from_utf8_lossy(&out.stdout).trim().parse().ok()
}

/// Generates every (prompt, style) pair at the same seed, prompt-major, and
/// scores it. Images are written to `out_dir`.
pub fn evaluate_testset(
    model: &mut Model,
    testset: &TestSet,
    embedder_cmd: Option<&str>,
    opts: &SampleOptions,
    out_dir: &Path,
) -> Result<EvalReport> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let refs = testset.styles.iter().map(load_rgb).collect::<Result<Vec<_>>>()?;
    let mut generated = Vec::new();
    let mut pairs = Vec::new();
    for (pi, prompt) in testset.prompts.iter().enumerate() {
        for (si, style) in refs.iter().enumerate() {
            let out = generate(model, prompt, std::slice::from_ref(style), None, opts)?;
            let path = out_dir.join(format!("p{pi:03}_s{si:03}.png"));
            out.save(&path)?;
            generated.push(out.image);
            pairs.push((pi, si, path));
        }
    }
    // Batch = references followed by generated images.
    let mut all = refs.clone();
    all.extend(generated);
    let scorer = StyleScorer::new(model, &all)?;
    let mut rows = Vec::with_capacity(pairs.len());
    for (k, (pi, si, path)) in pairs.into_iter().enumerate() {
        let prompt = &testset.prompts[pi];
        rows.push(EvalRow {
            prompt: prompt.clone(),
            style_ref: testset.styles[si].display().to_string(),
            image: path.display().to_string(),
            style_score: scorer.score(refs.len() + k, si)?,
            text_score: embedder_cmd.and_then(|c| run_embedder(c, &path, prompt)),
        });
    }
    Ok(EvalReport {
        metric: "style-statistics proxy: 1/(1+L2) of standardized multi-level channel statistics".into(),
        standardized: scorer.standardized(),
        aggregates: EvalAggregates::from_rows(&rows),
        rows,
    })
}
