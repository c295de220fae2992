//! Binary record IO and dataset manifests.
//!
//! Records follow the CIFAR-10 binary layout: 1 label byte then `3*S*S`
//! pixel bytes (planar R, G, B, row-major). For `S = 32` this is the
//! bit-exact 3073-byte CIFAR-10 format; manifests carry `image_size` so the
//! same layout serves desk-scale datasets.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ChannelStats, ImbalanceProfile, LabeledDataset, Provenance};
use crate::error::{Error, Result};

const CIFAR_SIZE: usize = 32;
const CIFAR_CLASSES: usize = 10;


fn load_record_file(
    path: &Path,
    image_size: usize,
    num_classes: usize,
    images: &mut Vec<u8>,
    labels: &mut Vec<u8>,
) -> Result<()> {
    let bytes = fs::read(path)?;
    let record = 1 + 3 * image_size * image_size;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::DataFormat(format!(
            "{}: {} bytes is not a whole number of {record}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    for (i, chunk) in bytes.chunks_exact(record).enumerate() {
        let label = chunk[0];
        if label as usize >= num_classes {
            return Err(Error::DataFormat(format!(
                "{}: label byte {label} at record {i} (offset {}) exceeds class count {num_classes}",
                path.display(),
                i * record
            )));
        }
        labels.push(label);
        images.extend_from_slice(&chunk[1..]);
    }
    Ok(())
}

/// Load CIFAR-10 binary batch files (3073-byte records, 32x32 RGB, labels
/// 0-9). Pixels scale to [0,1] on access; normalization happens downstream.
pub fn load_cifar10_binary(paths: &[PathBuf]) -> Result<LabeledDataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        load_record_file(path, CIFAR_SIZE, CIFAR_CLASSES, &mut images, &mut labels)?;
    }
    LabeledDataset::new(
        CIFAR_SIZE,
        CIFAR_CLASSES,
        images,
        labels,
        Provenance {
            source: paths
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(","),
            profile: None,
            seed: 0,
        },
    )
}

/// Load records with an explicit geometry (generalized CIFAR layout).
pub fn load_records(path: &Path, image_size: usize, num_classes: usize) -> Result<LabeledDataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    load_record_file(path, image_size, num_classes, &mut images, &mut labels)?;
    LabeledDataset::new(
        image_size,
        num_classes,
        images,
        labels,
        Provenance {
            source: path.display().to_string(),
            profile: None,
            seed: 0,
        },
    )
}

/// Write a dataset to the binary record format.
pub fn write_records(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let record = 1 + 3 * dataset.image_size() * dataset.image_size();
    let mut bytes = Vec::with_capacity(dataset.len() * record);
    for i in 0..dataset.len() {
        bytes.push(dataset.label(i) as u8);
        bytes.extend_from_slice(dataset.image_bytes(i));
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Everything needed to reload and normalize a prepared dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config_hash: String,
    pub source: String,
    pub profile: ImbalanceProfile,
    pub seed: u64,
    pub image_size: usize,
    pub num_classes: usize,
    pub per_class_counts: Vec<usize>,
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
    /// Record file path, relative to the manifest's directory.
    pub data_file: String,
}

impl DatasetManifest {
    pub fn stats(&self) -> ChannelStats {
        ChannelStats {
            mean: self.channel_mean,
            std: self.channel_std,
        }
    }
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Load a manifest and its record file; validates the recorded per-class
/// counts against the data.
pub fn load_manifest(path: &Path) -> Result<(DatasetManifest, LabeledDataset)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let data_path = dir.join(&manifest.data_file);
    let mut dataset = load_records(&data_path, manifest.image_size, manifest.num_classes)?;
    dataset.provenance = Provenance {
        source: manifest.source.clone(),
        profile: Some(manifest.profile.clone()),
        seed: manifest.seed,
    };
    let counts = dataset.per_class_counts();
    if counts != manifest.per_class_counts {
        return Err(Error::ConfigMismatch(format!(
            "manifest declares per-class counts {:?} but data file has {:?}",
            manifest.per_class_counts, counts
        )));
    }
    Ok((manifest, dataset))
}
