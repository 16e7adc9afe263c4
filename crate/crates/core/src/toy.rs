//! Procedural captioned corpus: coloured, textured shapes whose captions
//! describe only the content, so style must come from the reference image.

use std::f32::consts::PI;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image_io::save_png;
use crate::trainer::{DatasetManifest, ManifestRecord};

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const POSITIONS: [&str; 3] = ["left", "center", "right"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Texture {
    Stripes,
    Dots,
    Checker,
    Waves,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyStyle {
    pub background: [f32; 3],
    pub foreground: [f32; 3],
    pub accent: [f32; 3],
    pub texture: Texture,
    pub frequency: f32,
}

const PALETTES: [[[f32; 3]; 3]; 8] = [
    [[0.08, 0.10, 0.35], [0.95, 0.78, 0.20], [0.45, 0.70, 0.95]],
    [[0.70, 0.08, 0.12], [0.98, 0.94, 0.82], [0.05, 0.05, 0.05]],
    [[0.10, 0.35, 0.15], [0.98, 0.55, 0.10], [0.65, 0.95, 0.30]],
    [[0.98, 0.78, 0.85], [0.05, 0.55, 0.55], [1.00, 1.00, 1.00]],
    [[0.02, 0.02, 0.02], [0.96, 0.96, 0.96], [0.50, 0.50, 0.50]],
    [[0.35, 0.10, 0.50], [0.98, 0.92, 0.15], [0.90, 0.20, 0.75]],
    [[0.40, 0.26, 0.13], [0.92, 0.86, 0.70], [0.72, 0.30, 0.12]],
    [[0.45, 0.90, 0.92], [0.85, 0.10, 0.10], [0.10, 0.20, 0.80]],
];

/// The eight fixed styles of the corpus.
pub fn toy_styles() -> Vec<ToyStyle> {
    let textures = [Texture::Stripes, Texture::Dots, Texture::Checker, Texture::Waves];
    PALETTES
        .iter()
        .enumerate()
        .map(|(i, p)| ToyStyle {
            background: p[0],
            foreground: p[1],
            accent: p[2],
            texture: textures[i % 4],
            frequency: 4.0 + 2.0 * (i / 4) as f32,
        })
        .collect()
}

fn pattern(texture: Texture, f: f32, u: f32, v: f32, phase: f32) -> f32 {
    match texture {
        Texture::Stripes => 0.5 + 0.5 * (2.0 * PI * (f * (u + v) * 0.7 + phase)).sin(),
        Texture::Dots => {
            let du = (f * u + phase).fract() - 0.5;
            let dv = (f * v + phase).fract() - 0.5;
            if du * du + dv * dv < 0.09 {
                1.0
            } else {
                0.0
            }
        }
        Texture::Checker => (((f * u + phase).floor() + (f * v + phase).floor()) as i64).rem_euclid(2) as f32,
        Texture::Waves => 0.5 + 0.5 * (2.0 * PI * (f * u + phase) + 3.0 * (4.0 * PI * v).sin()).sin(),
    }
}

fn inside(shape: &str, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        "circle" => dx * dx + dy * dy <= r * r,
        "square" => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        "triangle" => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.6,
        _ => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r),
    }
}

/// Renders one `(3, size, size)` image; `seed` jitters placement, scale,
/// texture phase and pixel noise.
pub fn render(style: &ToyStyle, shape: &str, position: &str, size: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cx = match position {
        "left" => 0.27,
        "center" => 0.5,
        "right" => 0.73,
        other => return Err(Error::Argument(format!("unknown position `{other}`"))),
    } + rng.random_range(-0.04f32..0.04);
    let cy = 0.5 + rng.random_range(-0.08f32..0.08);
    let r = rng.random_range(0.16f32..0.22);
    let phase: f32 = rng.random();
    let n = size * size;
    let mut px = vec![0f32; 3 * n];
    for y in 0..size {
        for x in 0..size {
            let u = (x as f32 + 0.5) / size as f32;
            let v = (y as f32 + 0.5) / size as f32;
            let p = pattern(style.texture, style.frequency, u, v, phase);
            let is_shape = inside(shape, u - cx, v - cy, r);
            for c in 0..3 {
                let base = if is_shape {
                    style.foreground[c] * (1.0 - 0.3 * p) + style.accent[c] * 0.3 * p
                } else {
                    style.background[c] * (1.0 - 0.5 * p) + style.accent[c] * 0.5 * p
                };
                let noise = rng.random_range(-0.03f32..0.03);
                px[c * n + y * size + x] = (base + noise).clamp(0.0, 1.0);
            }
        }
    }
    Ok(Tensor::from_vec(px, (3, size, size), &Device::Cpu)?)
}

pub fn caption(shape: &str, position: &str) -> String {
    format!("a {shape} on the {position}")
}

#[derive(Debug, Clone)]
pub struct ToyItem {
    pub path: PathBuf,
    pub caption: String,
    pub style: usize,
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub manifest: PathBuf,
    pub items: Vec<ToyItem>,
}

/// Writes `count` images and `manifest.jsonl` into `dir`. Styles cycle so
/// every style is equally represented.
pub fn write_toy_corpus(dir: &Path, count: usize, size: usize, seed: u64) -> Result<ToyCorpus> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let styles = toy_styles();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let style = i % styles.len();
        let shape = SHAPES[rng.random_range(0..SHAPES.len())];
        let position = POSITIONS[rng.random_range(0..POSITIONS.len())];
        let img = render(&styles[style], shape, position, size, rng.random())?;
        let path = dir.join(format!("img_{i:05}.png"));
        save_png(&path, &img, &[])?;
        items.push(ToyItem {
            path,
            caption: caption(shape, position),
            style,
        });
    }
    let manifest = DatasetManifest {
        records: items
            .iter()
            .map(|it| ManifestRecord {
                image_path: PathBuf::from(it.path.file_name().unwrap()),
                caption: it.caption.clone(),
                style: Some(format!("s{}", it.style)),
            })
            .collect(),
    };
    let manifest_path = dir.join("manifest.jsonl");
    manifest.save(&manifest_path)?;
    Ok(ToyCorpus {
        manifest: manifest_path,
        items,
    })
}
