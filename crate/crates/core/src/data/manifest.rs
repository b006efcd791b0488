use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, Image, Modality, Split};
use crate::error::Result;

/// SHA-256 of an image's dimensions and little-endian `f32` values.
pub fn image_digest(image: &Image) -> String {
    let mut h = Sha256::new();
    for d in [image.channels(), image.height(), image.width()] {
        h.update((d as u64).to_le_bytes());
    }
    for v in image.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub index: usize,
    pub label: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub checksum: String,
}

/// Reproducibility record: item checksums plus split assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: String,
    pub modality: Modality,
    pub class_names: Vec<String>,
    pub items: Vec<ManifestItem>,
    pub splits: Vec<SplitRecord>,
}

impl DatasetManifest {
    pub fn new(source: impl Into<String>, ds: &Dataset) -> Self {
        DatasetManifest {
            source: source.into(),
            modality: ds.modality(),
            class_names: ds.class_names().to_vec(),
            items: ds
                .items()
                .iter()
                .enumerate()
                .map(|(index, s)| ManifestItem {
                    index,
                    label: s.label,
                    sha256: image_digest(&s.image),
                })
                .collect(),
            splits: Vec::new(),
        }
    }

    pub fn record_split(&mut self, seed: u64, split: &Split) {
        self.splits.push(SplitRecord {
            seed,
            train: split.train_indices.clone(),
            val: split.val_indices.clone(),
            test: split.test_indices.clone(),
            checksum: split.checksum(),
        });
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}
