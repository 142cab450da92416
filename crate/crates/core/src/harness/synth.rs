//! Procedural image corpora used in place of real radiographs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use crate::classifier::Labeled;
use std::path::Path;

use super::{write_numbered, HarnessError};
use crate::imaging::GrayImage;

pub const SHAPE_NAMES: [&str; 5] = ["disk", "square", "triangle", "cross", "ring"];

fn render(size: usize, rng: &mut ChaCha8Rng, inside: impl Fn(f64, f64) -> bool) -> GrayImage {
    let bg = rng.random_range(0.05..0.3);
    let fg = rng.random_range(0.65..0.95);
    let noise = Normal::new(0.0, 0.03).expect("finite std");
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            // normalized coordinates of the pixel center in [-1, 1]
            let u = (x as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let v = (y as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let base = if inside(u, v) { fg } else { bg };
            pixels.push(base + noise.sample(rng));
        }
    }
    GrayImage::from_clamped(size, size, pixels).expect("size > 0")
}

/// One image of shape class `label` (see [`SHAPE_NAMES`]) with random
/// position, scale and intensities.
pub fn shape_image(label: usize, size: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    let r = rng.random_range(0.45..0.7);
    let cx = rng.random_range(-0.2..0.2);
    let cy = rng.random_range(-0.2..0.2);
    match label % 5 {
        0 => render(size, rng, |u, v| (u - cx).hypot(v - cy) < r),
        1 => render(size, rng, |u, v| (u - cx).abs() < r * 0.85 && (v - cy).abs() < r * 0.85),
        2 => render(size, rng, |u, v| {
            let (du, dv) = (u - cx, v - cy);
            dv < r * 0.7 && dv > -r && du.abs() < (dv + r) * 0.6
        }),
        3 => render(size, rng, |u, v| {
            let (du, dv) = ((u - cx).abs(), (v - cy).abs());
            (du < r * 0.3 && dv < r) || (dv < r * 0.3 && du < r)
        }),
        _ => render(size, rng, |u, v| {
            let d = (u - cx).hypot(v - cy);
            d < r && d > r * 0.55
        }),
    }
}

/// `per_class` images of each of the five shape classes, interleaved by
/// class.
pub fn shapes(per_class: usize, size: usize, seed: u64) -> Vec<Labeled> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_class * 5);
    for _ in 0..per_class {
        for label in 0..5 {
            out.push(Labeled {
                image: shape_image(label, size, &mut rng),
                label,
            });
        }
    }
    out
}

/// Texture-orientation task used for backbone pretraining: horizontal,
/// vertical, diagonal and anti-diagonal stripes, plus checkerboards.
pub fn proxy_textures(per_class: usize, size: usize, seed: u64) -> Vec<Labeled> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).expect("finite std");
    let mut out = Vec::with_capacity(per_class * 5);
    for _ in 0..per_class {
        for label in 0..5 {
            let period = rng.random_range(3.0..7.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let contrast = rng.random_range(0.2..0.45);
            let k = std::f64::consts::TAU / period;
            let pixels = (0..size * size)
                .map(|i| {
                    let (x, y) = ((i % size) as f64, (i / size) as f64);
                    let wave = match label {
                        0 => (k * y + phase).sin(),
                        1 => (k * x + phase).sin(),
                        2 => (k * (x + y) / 2f64.sqrt() + phase).sin(),
                        3 => (k * (x - y) / 2f64.sqrt() + phase).sin(),
                        _ => (k * x + phase).sin() * (k * y + phase).sin(),
                    };
                    0.5 + contrast * wave + noise.sample(&mut rng)
                })
                .collect();
            out.push(Labeled {
                image: GrayImage::from_clamped(size, size, pixels).expect("size > 0"),
                label,
            });
        }
    }
    out
}

/// A knee-like pseudo-radiograph: two bright bone ellipses (femur above,
/// tibia below) separated by a joint gap that narrows with `grade`, on a
/// darker soft-tissue background. Higher grades also add sclerosis
/// (brighter bone margins) and marginal spurs.
pub fn pseudo_radiograph(grade: usize, size: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    let grade = grade.min(4) as f64;
    let gap = (0.5 - 0.11 * grade + rng.random_range(-0.09..0.09)).max(0.02);
    let cx = rng.random_range(-0.08..0.08);
    let cy = rng.random_range(-0.06..0.06);
    let rx = rng.random_range(0.62..0.78);
    let ry = rng.random_range(0.55..0.7);
    let bone = rng.random_range(0.62..0.78);
    let tissue = rng.random_range(0.12..0.25);
    let margin = 0.04 * grade;
    let spur = 0.05 * grade;
    let noise = Normal::new(0.0, 0.012).expect("finite std");
    let pixels = (0..size * size)
        .map(|i| {
            let u = ((i % size) as f64 + 0.5) / size as f64 * 2.0 - 1.0 - cx;
            let v = ((i / size) as f64 + 0.5) / size as f64 * 2.0 - 1.0 - cy;
            let femur = (u / rx).powi(2) + ((v + gap / 2.0 + ry) / ry).powi(2);
            let tibia = (u / rx).powi(2) + ((v - gap / 2.0 - ry) / ry).powi(2);
            let d = femur.min(tibia);
            let mut value = tissue + 0.08 * (1.0 - u * u).max(0.0);
            if d < 1.0 {
                value = bone;
                if d > 0.85 {
                    value += margin;
                }
            } else if d < 1.0 + spur && u.abs() > rx * 0.8 {
                value = bone * 0.9;
            }
            value + noise.sample(rng)
        })
        .collect();
    GrayImage::from_clamped(size, size, pixels).expect("size > 0")
}

/// `counts[g]` pseudo-radiographs of each grade `g`, grouped by grade.
pub fn pseudo_radiographs(counts: [usize; 5], size: usize, seed: u64) -> Vec<Labeled> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (grade, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            out.push(Labeled {
                image: pseudo_radiograph(grade, size, &mut rng),
                label: grade,
            });
        }
    }
    out
}

/// Writes `pseudo_radiographs(counts, size, seed)` as a `{grade}/{nnnnn}.pgm`
/// tree under `root`.
pub fn write_tree(root: &Path, counts: [usize; 5], size: usize, seed: u64) -> Result<(), HarnessError> {
    let images = pseudo_radiographs(counts, size, seed);
    for grade in 0..counts.len() {
        let group: Vec<GrayImage> = images.iter().filter(|l| l.label == grade).map(|l| l.image.clone()).collect();
        write_numbered(&root.join(grade.to_string()), &group)?;
    }
    Ok(())
}
