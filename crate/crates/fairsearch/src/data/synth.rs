//! Synthetic image sources for desk-scale runs: class-conditional oriented
//! gratings (learnable by small conv nets, not by global intensity alone),
//! and a brightness task whose label is predictable from average-pooled
//! intensity.

use rand::Rng;

use super::{LabeledDataset, Provenance};
use crate::error::Result;
use crate::seeding::rng_for;

/// Class-structured images: oriented sinusoidal gratings with random phase,
/// per-image chroma, and pixel noise. Class `c` selects orientation and
/// frequency; mean intensity is class-independent.
pub fn generate_synthetic(
    num_classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    let s = image_size;
    let plane = s * s;
    let n = num_classes * per_class;
    let mut images = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        let theta = std::f64::consts::PI * c as f64 / num_classes as f64;
        let freq = 2.0 + (c % 3) as f64;
        let (cos_t, sin_t) = (theta.cos(), theta.sin());
        for i in 0..per_class {
            let mut rng = rng_for(seed, &["synth", &c.to_string(), &i.to_string()]);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amplitude = rng.gen_range(0.25..0.45);
            let base = rng.gen_range(0.35..0.65);
            let chroma: [f64; 3] = [
                rng.gen_range(0.6..1.0),
                rng.gen_range(0.6..1.0),
                rng.gen_range(0.6..1.0),
            ];
            let mut pixels = vec![0.0f64; 3 * plane];
            for y in 0..s {
                for x in 0..s {
                    let u = (x as f64 * cos_t + y as f64 * sin_t) / s as f64;
                    let wave = (std::f64::consts::TAU * freq * u + phase).sin();
                    for ch in 0..3 {
                        pixels[ch * plane + y * s + x] = base + amplitude * chroma[ch] * wave;
                    }
                }
            }
            for v in pixels.iter_mut() {
                *v += rng.gen_range(-0.12..0.12);
            }
            images.extend(
                pixels
                    .iter()
                    .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
            );
            labels.push(c as u8);
        }
    }
    LabeledDataset::new(
        image_size,
        num_classes,
        images,
        labels,
        Provenance {
            source: format!("synth:gratings:{num_classes}x{per_class}@{image_size}"),
            profile: None,
            seed,
        },
    )
}

/// Two-class task where the label is exactly the average intensity: class 0
/// images are dim, class 1 bright. Average pooling preserves the signal;
/// zeroing it out destroys it.
pub fn generate_brightness_task(
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    let s = image_size;
    let plane = s * s;
    let mut images = Vec::with_capacity(2 * per_class * 3 * plane);
    let mut labels = Vec::with_capacity(2 * per_class);
    for c in 0..2usize {
        for i in 0..per_class {
            let mut rng = rng_for(seed, &["bright", &c.to_string(), &i.to_string()]);
            let level = if c == 0 {
                rng.gen_range(0.10..0.35)
            } else {
                rng.gen_range(0.65..0.90)
            };
            for _ in 0..3 * plane {
                let v: f64 = level + rng.gen_range(-0.08..0.08);
                images.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            labels.push(c as u8);
        }
    }
    LabeledDataset::new(
        image_size,
        2,
        images,
        labels,
        Provenance {
            source: format!("synth:brightness:2x{per_class}@{image_size}"),
            profile: None,
            seed,
        },
    )
}
