//! Synthetic single-object images: one flat-coloured circle, square or
//! triangle over a striped gradient background. The label is the shape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

pub const SHAPE_CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ShapesConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

impl ShapesConfig {
    pub fn new(count: usize, size: usize, seed: u64) -> Self {
        Self { count, size, seed }
    }
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        _ => {
            // Upward triangle with apex at -r and base at +r/2.
            let t = (dy + r) / (1.5 * r);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * r * 0.95
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, size: usize) -> (Vec<u8>, usize) {
    let s = size as f64;
    let bg0: [f64; 3] = std::array::from_fn(|_| rng.random_range(40.0..140.0));
    let bg1: [f64; 3] = std::array::from_fn(|_| rng.random_range(40.0..140.0));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let freq: f64 = rng.random_range(2.0..6.0) * std::f64::consts::TAU / s;
    let amp: f64 = rng.random_range(6.0..18.0);
    let shape = rng.random_range(0..SHAPE_CLASSES);
    let hue: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let fg: [f64; 3] = std::array::from_fn(|c| 150.0 + 105.0 * hue[c]);
    let r = rng.random_range(0.15..0.3) * s;
    let cx = rng.random_range(0.3..0.7) * s;
    let cy = rng.random_range(0.3..0.7) * s;
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut px = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let on = inside(shape, fx - cx, fy - cy, r);
            let t = fy / s;
            let stripe = amp * ((fx * ca + fy * sa) * freq).sin();
            for c in 0..3 {
                let v = if on { fg[c] } else { bg0[c] * (1.0 - t) + bg1[c] * t + stripe };
                px.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    (px, shape)
}

/// Deterministic in `cfg.seed`; sample `i` depends only on `(seed, i)`.
pub fn shapes_dataset(cfg: &ShapesConfig) -> Result<Dataset> {
    if cfg.count == 0 {
        return Err(Error::Invalid("shapes dataset needs at least one image".into()));
    }
    if cfg.size != 32 && cfg.size != 64 {
        return Err(Error::Invalid(format!("shapes images are 32 or 64 pixels, got {}", cfg.size)));
    }
    let mut pixels = Vec::with_capacity(cfg.count * cfg.size * cfg.size * 3);
    let mut labels = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let (px, label) = draw(&mut rng, cfg.size);
        pixels.extend(px);
        labels.push(label);
    }
    Dataset::new(pixels, cfg.size, cfg.size, Some(labels), SHAPE_CLASSES)
}
