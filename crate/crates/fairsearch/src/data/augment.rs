//! Seed-deterministic augmentation pairs: random crop with zero padding,
//! horizontal flip, brightness/contrast jitter, optional grayscale, then
//! per-channel normalization by dataset statistics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seeding::rng_for;

/// Per-channel mean/std of a dataset's `[0,1]`-scaled pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    /// No-op normalization (zero mean, unit std).
    pub fn identity() -> Self {
        ChannelStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_padding: usize,
    pub flip_prob: f64,
    /// Brightness/contrast factors drawn from `1 +- jitter`.
    pub jitter: f64,
    pub grayscale_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_padding: 4,
            flip_prob: 0.5,
            jitter: 0.4,
            grayscale_prob: 0.2,
        }
    }
}

impl AugmentConfig {
    /// Degenerate chain that reduces to plain normalization.
    pub fn identity() -> Self {
        AugmentConfig {
            crop_padding: 0,
            flip_prob: 0.0,
            jitter: 0.0,
            grayscale_prob: 0.0,
        }
    }
}

fn one_view(
    image: &[f64],
    size: usize,
    cfg: &AugmentConfig,
    stats: &ChannelStats,
    seed: u64,
    view: usize,
) -> Vec<f64> {
    let mut rng = rng_for(seed, &["view", &view.to_string()]);
    let plane = size * size;
    let p = cfg.crop_padding;

    // Fixed draw order keeps views reproducible independent of config values.
    let dy = if p > 0 { rng.gen_range(0..=2 * p) } else { 0 };
    let dx = if p > 0 { rng.gen_range(0..=2 * p) } else { 0 };
    let flip = rng.gen_range(0.0..1.0) < cfg.flip_prob;
    let brightness = 1.0 + rng.gen_range(-1.0..1.0) * cfg.jitter;
    let contrast = 1.0 + rng.gen_range(-1.0..1.0) * cfg.jitter;
    let gray = rng.gen_range(0.0..1.0) < cfg.grayscale_prob;

    // Crop from the zero-padded image: output pixel (y,x) reads padded
    // coordinate (y+dy, x+dx), i.e. source (y+dy-p, x+dx-p).
    let mut out = vec![0.0f64; 3 * plane];
    for ch in 0..3 {
        for y in 0..size {
            let sy = y as isize + dy as isize - p as isize;
            if sy < 0 || sy >= size as isize {
                continue;
            }
            for x in 0..size {
                let sx = x as isize + dx as isize - p as isize;
                if sx < 0 || sx >= size as isize {
                    continue;
                }
                out[ch * plane + y * size + x] = image[ch * plane + sy as usize * size + sx as usize];
            }
        }
    }
    if flip {
        for ch in 0..3 {
            for y in 0..size {
                let row = &mut out[ch * plane + y * size..ch * plane + (y + 1) * size];
                row.reverse();
            }
        }
    }
    if cfg.jitter > 0.0 {
        for v in out.iter_mut() {
            *v *= brightness;
        }
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        for v in out.iter_mut() {
            *v = mean + (*v - mean) * contrast;
        }
        for v in out.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    if gray {
        for i in 0..plane {
            let m = (out[i] + out[plane + i] + out[2 * plane + i]) / 3.0;
            out[i] = m;
            out[plane + i] = m;
            out[2 * plane + i] = m;
        }
    }
    for ch in 0..3 {
        let m = stats.mean[ch];
        let sd = stats.std[ch];
        for v in out[ch * plane..(ch + 1) * plane].iter_mut() {
            *v = (*v - m) / sd;
        }
    }
    out
}

/// Two independently transformed views of one image, fully determined by
/// `seed` (and the view index). Input and output are planar RGB `[0,1]`
/// floats; outputs are normalized by `stats`.
pub fn augment_pair(
    image: &[f64],
    size: usize,
    cfg: &AugmentConfig,
    stats: &ChannelStats,
    seed: u64,
) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(image.len(), 3 * size * size);
    (
        one_view(image, size, cfg, stats, seed, 0),
        one_view(image, size, cfg, stats, seed, 1),
    )
}
