//! Long-tailed dataset tooling: imbalance profiles and their per-class count
//! formulas, subsampling, the disjoint weight/arch streams for bilevel
//! search, augmentation pairs, and evaluation metrics.

mod augment;
mod cifar;
mod eval;
mod synth;

pub use augment::{augment_pair, AugmentConfig, ChannelStats};
pub use cifar::{
    load_cifar10_binary, load_manifest, load_records, write_manifest, write_records,
    DatasetManifest,
};
pub use eval::{evaluate, EvalMetrics};
pub use synth::{generate_brightness_task, generate_synthetic};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{derive_seed, rng_for};
use crate::tensor::{Element, Tensor};

/// Label-distribution profile of a long-tailed dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Balance,
    Step,
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceProfile {
    pub kind: ProfileKind,
    /// Imbalance factor in (0, 1]; unused for `balance`.
    pub mu: f64,
    pub base_count: usize,
    pub num_classes: usize,
}

impl ImbalanceProfile {
    pub fn balance(base_count: usize, num_classes: usize) -> Self {
        ImbalanceProfile {
            kind: ProfileKind::Balance,
            mu: 1.0,
            base_count,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArg(format!(
                "profile needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.base_count == 0 {
            return Err(Error::InvalidArg("base_count must be positive".into()));
        }
        if self.kind != ProfileKind::Balance && !(self.mu > 0.0 && self.mu <= 1.0) {
            return Err(Error::InvalidArg(format!(
                "imbalance factor mu = {} outside (0, 1]",
                self.mu
            )));
        }
        Ok(())
    }
}

/// Exact floor of `base * mu^(num/den)` where `mu` is taken at its exact
/// binary-rational value. Computed by integer binary search over the count:
/// the largest `n` with `n^den <= base^den * mant^num * 2^(exp*num)`.
fn exact_power_count(base: usize, mu: f64, num: u32, den: u32) -> usize {
    debug_assert!(mu > 0.0 && mu <= 1.0 && den > 0);
    if num == 0 || mu == 1.0 {
        return base;
    }
    // Decompose mu = mant * 2^-shift exactly.
    let bits = mu.to_bits();
    let ieee_exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (mant, shift): (u64, i64) = if ieee_exp == 0 {
        (frac, 1074) // subnormal
    } else {
        (frac | (1 << 52), 1075 - ieee_exp)
    };
    debug_assert!(shift >= 0, "mu <= 1 has nonnegative shift");

    // n^den <= base^den * mant^num / 2^(shift*num)
    let rhs = BigUint::from(base).pow(den) * BigUint::from(mant).pow(num);
    let denom_shift = (shift as u64) * num as u64;
    let mut lo = 0usize;
    let mut hi = base;
    while lo < hi {
        let mid = (lo + hi + 1) / 2;
        let lhs = BigUint::from(mid).pow(den) << denom_shift;
        if lhs <= rhs {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    lo
}

/// Per-class sample counts under a profile. Counts are floored with a
/// minimum of 1 and are nonincreasing in the class index.
pub fn class_counts(profile: &ImbalanceProfile) -> Result<Vec<usize>> {
    profile.validate()?;
    let c = profile.num_classes;
    let base = profile.base_count;
    let counts = match profile.kind {
        ProfileKind::Balance => vec![base; c],
        ProfileKind::Step => {
            // The latter floor(C/2) classes hold base * mu samples.
            let head = c - c / 2;
            let tail_count = exact_power_count(base, profile.mu, 1, 1).max(1);
            (0..c)
                .map(|i| if i < head { base } else { tail_count })
                .collect()
        }
        ProfileKind::Exponential => (0..c)
            .map(|i| exact_power_count(base, profile.mu, i as u32, (c - 1) as u32).max(1))
            .collect(),
    };
    Ok(counts)
}

/// Where a dataset came from, carried along for manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub profile: Option<ImbalanceProfile>,
    pub seed: u64,
}

/// Images as raw bytes (N x 3 x S x S, planar RGB) plus labels. Immutable
/// after construction; pixel values scale to [0,1] on access.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    image_size: usize,
    num_classes: usize,
    images: Vec<u8>,
    labels: Vec<u8>,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(
        image_size: usize,
        num_classes: usize,
        images: Vec<u8>,
        labels: Vec<u8>,
        provenance: Provenance,
    ) -> Result<Self> {
        let record = 3 * image_size * image_size;
        if images.len() != labels.len() * record {
            return Err(Error::DataFormat(format!(
                "{} labels but {} pixel bytes ({} per image)",
                labels.len(),
                images.len(),
                record
            )));
        }
        if let Some((i, &l)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= num_classes)
        {
            return Err(Error::DataFormat(format!(
                "label {l} at record {i} exceeds {} classes",
                num_classes
            )));
        }
        Ok(LabeledDataset {
            image_size,
            num_classes,
            images,
            labels,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn label(&self, idx: usize) -> usize {
        self.labels[idx] as usize
    }

    pub fn labels_raw(&self) -> &[u8] {
        &self.labels
    }

    pub fn image_bytes(&self, idx: usize) -> &[u8] {
        let record = 3 * self.image_size * self.image_size;
        &self.images[idx * record..(idx + 1) * record]
    }

    /// One image as `[0,1]`-scaled floats, planar RGB.
    pub fn image_f64(&self, idx: usize) -> Vec<f64> {
        self.image_bytes(idx)
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect()
    }

    pub fn per_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Per-channel mean/std of the `[0,1]`-scaled pixels.
    pub fn channel_stats(&self) -> ChannelStats {
        let plane = self.image_size * self.image_size;
        let mut mean = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let n = (self.len() * plane) as f64;
        for idx in 0..self.len() {
            let img = self.image_bytes(idx);
            for ch in 0..3 {
                for &b in &img[ch * plane..(ch + 1) * plane] {
                    let v = b as f64 / 255.0;
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let mut std = [0.0f64; 3];
        for ch in 0..3 {
            mean[ch] /= n;
            let var = (sq[ch] / n - mean[ch] * mean[ch]).max(0.0);
            std[ch] = var.sqrt().max(1e-6);
        }
        ChannelStats { mean, std }
    }
}

/// Select, per class, the first `n_c` indices of a seed-determined
/// permutation of that class's samples; the output order is a seeded shuffle
/// of the union.
pub fn subsample_longtailed(
    full: &LabeledDataset,
    profile: &ImbalanceProfile,
    seed: u64,
) -> Result<LabeledDataset> {
    if profile.num_classes != full.num_classes() {
        return Err(Error::ConfigMismatch(format!(
            "profile has {} classes, dataset has {}",
            profile.num_classes,
            full.num_classes()
        )));
    }
    let counts = class_counts(profile)?;
    let available = full.per_class_counts();
    let mut picked: Vec<usize> = Vec::new();
    for (c, (&want, &have)) in counts.iter().zip(available.iter()).enumerate() {
        if have < want {
            return Err(Error::InvalidArg(format!(
                "class {c}: profile wants {want} samples, dataset has {have}"
            )));
        }
        let mut class_indices: Vec<usize> =
            (0..full.len()).filter(|&i| full.label(i) == c).collect();
        use rand::seq::SliceRandom;
        class_indices.shuffle(&mut rng_for(seed, &["subsample", &c.to_string()]));
        picked.extend_from_slice(&class_indices[..want]);
    }
    use rand::seq::SliceRandom;
    picked.shuffle(&mut rng_for(seed, &["subsample_order"]));

    let record = 3 * full.image_size() * full.image_size();
    let mut images = Vec::with_capacity(picked.len() * record);
    let mut labels = Vec::with_capacity(picked.len());
    for &i in &picked {
        images.extend_from_slice(full.image_bytes(i));
        labels.push(full.label(i) as u8);
    }
    LabeledDataset::new(
        full.image_size(),
        full.num_classes(),
        images,
        labels,
        Provenance {
            source: full.provenance.source.clone(),
            profile: Some(profile.clone()),
            seed,
        },
    )
}

/// One half of the disjoint bilevel data split. Yields seed-deterministic
/// shuffled batches, reshuffled per epoch from a derived seed.
pub struct StreamHalf {
    dataset: Arc<LabeledDataset>,
    indices: Vec<usize>,
    seed: u64,
    label_reads: Arc<AtomicU64>,
}

impl StreamHalf {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn dataset(&self) -> &LabeledDataset {
        &self.dataset
    }

    /// Batches for one epoch: a seeded shuffle of the stream's indices,
    /// chunked; a trailing partial batch is kept.
    pub fn epoch_batches(&self, epoch: usize, batch_size: usize) -> Vec<Vec<usize>> {
        assert!(batch_size > 0, "batch size must be positive");
        let mut order = self.indices.clone();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng_for(self.seed, &["epoch", &epoch.to_string()]));
        order.chunks(batch_size).map(|c| c.to_vec()).collect()
    }

    /// Normalized image batch (no augmentation).
    pub fn images<T: Element>(&self, batch: &[usize], stats: &ChannelStats) -> Tensor<T> {
        batch_images(&self.dataset, batch, stats)
    }

    /// Two independently augmented views per image, for the self-supervised
    /// loss. Augmentations are a pure function of (stream seed, epoch,
    /// sample index, view).
    pub fn augmented_pair<T: Element>(
        &self,
        batch: &[usize],
        stats: &ChannelStats,
        cfg: &AugmentConfig,
        epoch: usize,
    ) -> (Tensor<T>, Tensor<T>) {
        let s = self.dataset.image_size();
        let numel = batch.len() * 3 * s * s;
        let mut a = Vec::with_capacity(numel);
        let mut b = Vec::with_capacity(numel);
        for &idx in batch {
            let img = self.dataset.image_f64(idx);
            let aug_seed = derive_seed(
                self.seed,
                &["aug", &epoch.to_string(), &idx.to_string()],
            );
            let (va, vb) = augment_pair(&img, s, cfg, stats, aug_seed);
            a.extend(va.iter().map(|&v| T::from_f64(v)));
            b.extend(vb.iter().map(|&v| T::from_f64(v)));
        }
        let shape = vec![batch.len(), 3, s, s];
        (
            Tensor::new(shape.clone(), a).expect("augmented batch is rectangular"),
            Tensor::new(shape, b).expect("augmented batch is rectangular"),
        )
    }

    /// Labels for a batch. Counts as a label read on the stream pair.
    pub fn labels(&self, batch: &[usize]) -> Vec<usize> {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        batch.iter().map(|&i| self.dataset.label(i)).collect()
    }
}

/// Normalized image batch from arbitrary dataset indices.
pub fn batch_images<T: Element>(
    dataset: &LabeledDataset,
    batch: &[usize],
    stats: &ChannelStats,
) -> Tensor<T> {
    let s = dataset.image_size();
    let plane = s * s;
    let mut data = Vec::with_capacity(batch.len() * 3 * plane);
    for &idx in batch {
        let img = dataset.image_bytes(idx);
        for ch in 0..3 {
            let m = stats.mean[ch];
            let sd = stats.std[ch];
            for &b in &img[ch * plane..(ch + 1) * plane] {
                data.push(T::from_f64((b as f64 / 255.0 - m) / sd));
            }
        }
    }
    Tensor::new(vec![batch.len(), 3, s, s], data).expect("batch is rectangular")
}

/// A stream over a whole dataset (retraining and plain supervised loops).
pub fn full_stream(dataset: Arc<LabeledDataset>, seed: u64) -> StreamHalf {
    let indices = (0..dataset.len()).collect();
    StreamHalf {
        dataset,
        indices,
        seed: derive_seed(seed, &["stream", "full"]),
        label_reads: Arc::new(AtomicU64::new(0)),
    }
}

/// The disjoint weight/arch streams for bilevel search, with a shared
/// label-read counter (the self-supervised mode must never read labels).
pub struct SearchStreams {
    pub weight: StreamHalf,
    pub arch: StreamHalf,
}

impl SearchStreams {
    pub fn label_reads(&self) -> u64 {
        self.weight.label_reads.load(Ordering::Relaxed)
    }
}

/// Split a training dataset into disjoint weight/arch streams, preserving
/// class proportions as closely as integer rounding allows. `fraction` is
/// the weight-stream share; a class with a single sample goes entirely to
/// the weight stream.
pub fn split_search_streams(
    train: Arc<LabeledDataset>,
    fraction: f64,
    seed: u64,
) -> Result<SearchStreams> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArg(format!(
            "split fraction {fraction} outside (0, 1)"
        )));
    }
    let mut weight_indices = Vec::new();
    let mut arch_indices = Vec::new();
    for c in 0..train.num_classes() {
        let mut class_indices: Vec<usize> =
            (0..train.len()).filter(|&i| train.label(i) == c).collect();
        use rand::seq::SliceRandom;
        class_indices.shuffle(&mut rng_for(seed, &["split", &c.to_string()]));
        let n = class_indices.len();
        let take = ((n as f64 * fraction) + 0.5).floor() as usize;
        let take = take.clamp(usize::from(n > 0), n);
        weight_indices.extend_from_slice(&class_indices[..take]);
        arch_indices.extend_from_slice(&class_indices[take..]);
    }
    weight_indices.sort_unstable();
    arch_indices.sort_unstable();
    let label_reads = Arc::new(AtomicU64::new(0));
    Ok(SearchStreams {
        weight: StreamHalf {
            dataset: Arc::clone(&train),
            indices: weight_indices,
            seed: derive_seed(seed, &["stream", "weight"]),
            label_reads: Arc::clone(&label_reads),
        },
        arch: StreamHalf {
            dataset: train,
            indices: arch_indices,
            seed: derive_seed(seed, &["stream", "arch"]),
            label_reads,
        },
    })
}
