//! Datasets: seeded synthetic shapes and MNIST-style IDX files.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use resonance::seed;
use resonance::{LabeledImages, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SHAPE_CLASSES: [&str; 4] = ["square", "disk", "cross", "triangle"];

fn d_size() -> usize {
    32
}
fn d_background() -> f64 {
    0.25
}
fn d_foreground() -> f64 {
    0.75
}
fn d_jitter() -> usize {
    4
}
fn d_scales() -> usize {
    5
}
fn d_radius() -> (f64, f64) {
    (0.2, 0.3)
}

/// Parameters of [`gen_synthetic_shapes`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapesConfig {
    pub n: usize,
    #[serde(default = "d_size")]
    pub size: usize,
    /// Std of additive Gaussian pixel noise (before clipping).
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_background")]
    pub background: f64,
    #[serde(default = "d_foreground")]
    pub foreground: f64,
    /// Maximum center offset from the image middle, in pixels.
    #[serde(default = "d_jitter")]
    pub jitter: usize,
    /// Half-extent range as fractions of `size`.
    #[serde(default = "d_radius")]
    pub radius: (f64, f64),
    /// Number of evenly spaced half-extents drawn from `radius`.
    #[serde(default = "d_scales")]
    pub scales: usize,
}

impl ShapesConfig {
    pub fn new(n: usize, noise: f64, seed: u64) -> Self {
        Self {
            n,
            size: d_size(),
            noise,
            seed,
            background: d_background(),
            foreground: d_foreground(),
            jitter: d_jitter(),
            radius: d_radius(),
            scales: d_scales(),
        }
    }
}

fn inside(class: usize, dy: f64, dx: f64, r: f64) -> bool {
    match class {
        0 => dy.abs() <= 0.85 * r && dx.abs() <= 0.85 * r,
        1 => dy * dy + dx * dx <= r * r,
        2 => (dy.abs() <= r && dx.abs() <= r / 3.0) || (dx.abs() <= r && dy.abs() <= r / 3.0),
        _ => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
    }
}

/// Class-balanced images `[n, 1, size, size]` of four filled shapes.
/// Labels index [`SHAPE_CLASSES`].
pub fn gen_synthetic_shapes(cfg: &ShapesConfig) -> Result<LabeledImages> {
    if cfg.n == 0 || cfg.size < 8 || cfg.scales == 0 {
        return Err(Error::Config("synthetic shapes need n >= 1, size >= 8 and scales >= 1".into()));
    }
    let (lo, hi) = cfg.radius;
    if !(lo > 0.0 && lo <= hi && hi < 0.5) {
        return Err(Error::Config(format!("radius range {:?} must satisfy 0 < lo <= hi < 0.5", cfg.radius)));
    }
    let mut rng = seed::rng(cfg.seed);
    let mut labels: Vec<usize> = (0..cfg.n).map(|k| k % SHAPE_CLASSES.len()).collect();
    labels.shuffle(&mut rng);
    let s = cfg.size;
    let mid = (s as f64 - 1.0) / 2.0;
    let jitter = cfg.jitter as i64;
    let mut data = Vec::with_capacity(cfg.n * s * s);
    for &class in &labels {
        let cy = mid + rng.random_range(-jitter..=jitter) as f64;
        let cx = mid + rng.random_range(-jitter..=jitter) as f64;
        let level = rng.random_range(0..cfg.scales);
        let r = (lo + (hi - lo) * level as f64 / (cfg.scales - 1).max(1) as f64) * s as f64;
        for y in 0..s {
            for x in 0..s {
                let base = if inside(class, y as f64 - cy, x as f64 - cx, r) {
                    cfg.foreground
                } else {
                    cfg.background
                };
                let n: f64 = if cfg.noise > 0.0 {
                    cfg.noise * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                data.push((base + n).clamp(0.0, 1.0));
            }
        }
    }
    Ok(LabeledImages::new(Tensor::new(vec![cfg.n, 1, s, s], data)?, labels)?)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Integrity(format!("IDX header truncated at byte {at}")))
}

/// IDX image file (magic `0x00000803`) to `[N, 1, rows, cols]` in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::Integrity(format!("bad IDX image magic {magic:#010x}")));
    }
    let (n, rows, cols) = (be_u32(bytes, 4)? as usize, be_u32(bytes, 8)? as usize, be_u32(bytes, 12)? as usize);
    let len = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != len {
        return Err(Error::Integrity(format!("IDX images: expected {len} payload bytes, found {}", payload.len())));
    }
    if len == 0 {
        return Err(Error::Integrity("IDX image file holds no pixels".into()));
    }
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(vec![n, 1, rows, cols], data)?)
}

/// IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::Integrity(format!("bad IDX label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Integrity(format!("IDX labels: expected {n} payload bytes, found {}", payload.len())));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImages> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Integrity(format!(
            "{} images but {} labels",
            images.shape()[0],
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Integrity(format!("label {bad} outside 0..=9")));
    }
    Ok(LabeledImages::new(images, labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let cfg = ShapesConfig::new(103, 0.1, 5);
        let a = gen_synthetic_shapes(&cfg).unwrap();
        let b = gen_synthetic_shapes(&cfg).unwrap();
        assert_eq!(a, b);
        let mut hist = [0usize; 4];
        a.labels.iter().for_each(|&l| hist[l] += 1);
        assert_eq!(hist, [26, 26, 26, 25]);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn idx_header_errors() {
        assert!(parse_idx_images(&[0, 0, 8, 3]).is_err());
        assert!(parse_idx_labels(&[0, 0, 8, 3, 0, 0, 0, 1, 7]).is_err());
        assert_eq!(parse_idx_labels(&[0, 0, 8, 1, 0, 0, 0, 1, 7]).unwrap(), vec![7]);
    }
}
