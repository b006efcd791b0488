//! Datasets, scarce-regime splits and the synthetic benchmark corpus.

mod files;
mod image;
mod manifest;
mod pseudo;
mod split;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use files::{load_image_dataset, save_image_dataset};
pub use image::Image;
pub use manifest::{image_digest, DatasetManifest, ManifestItem, SplitRecord};
pub use pseudo::{load_pseudo_images, read_pseudo_images, write_pseudo_images, PSEUDO_MAGIC};
pub use split::{scarce_split, Split, SplitSpec};
pub use synthetic::{generate_synthetic, generate_synthetic_pseudo, SyntheticSpec, MAX_VARIANCE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    /// Three-channel raster with values in `[0, 1]`.
    Image,
    /// Square symmetric real matrix, one channel.
    PseudoImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
}

/// Labelled samples sharing one modality and one spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    items: Vec<Sample>,
    class_names: Vec<String>,
    modality: Modality,
}

impl Dataset {
    /// Builds a dataset in which every class has at least one item.
    pub fn new(items: Vec<Sample>, class_names: Vec<String>, modality: Modality) -> Result<Self> {
        let ds = Self::subset_of(items, class_names, modality)?;
        let counts = ds.class_counts();
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Data(format!(
                "class '{}' has no items",
                ds.class_names[c]
            )));
        }
        Ok(ds)
    }

    /// Like [`Dataset::new`] but allows classes without items, as in a test split.
    pub fn subset_of(
        items: Vec<Sample>,
        class_names: Vec<String>,
        modality: Modality,
    ) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::Data("dataset has no classes".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = class_names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::Data(format!("duplicate class name '{dup}'")));
        }
        if let Some(first) = items.first() {
            let dims = (
                first.image.channels(),
                first.image.height(),
                first.image.width(),
            );
            for (i, s) in items.iter().enumerate() {
                if s.label >= class_names.len() {
                    return Err(Error::Data(format!(
                        "item {i} has label {} but there are {} classes",
                        s.label,
                        class_names.len()
                    )));
                }
                let d = (s.image.channels(), s.image.height(), s.image.width());
                if d != dims {
                    return Err(Error::Data(format!(
                        "item {i} has size {d:?}, expected {dims:?}"
                    )));
                }
            }
            if modality == Modality::PseudoImage && (dims.0 != 1 || dims.1 != dims.2) {
                return Err(Error::Data(format!(
                    "pseudo-images must be square single-channel, got {dims:?}"
                )));
            }
        }
        Ok(Dataset {
            items,
            class_names,
            modality,
        })
    }

    pub fn items(&self) -> &[Sample] {
        &self.items
    }
    pub fn len(&self) -> usize {
        self.items.len()
    }
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
    pub fn modality(&self) -> Modality {
        self.modality
    }

    /// `(channels, height, width)` of the items, if any.
    pub fn item_dims(&self) -> Option<(usize, usize, usize)> {
        self.items
            .first()
            .map(|s| (s.image.channels(), s.image.height(), s.image.width()))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for s in &self.items {
            counts[s.label] += 1;
        }
        counts
    }

    /// Item indices grouped by class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.class_names.len()];
        for (i, s) in self.items.iter().enumerate() {
            by[s.label].push(i);
        }
        by
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|s| s.label).collect()
    }

    /// The listed items, same classes and modality.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let items = indices
            .iter()
            .map(|&i| {
                self.items.get(i).cloned().ok_or_else(|| {
                    Error::Data(format!(
                        "index {i} out of range for {} items",
                        self.items.len()
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            items,
            class_names: self.class_names.clone(),
            modality: self.modality,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(label: usize, v: f32) -> Sample {
        Sample {
            image: Image::filled(3, 4, 4, v),
            label,
        }
    }

    #[test]
    fn validates_labels_and_coverage() {
        let names = vec!["a".to_string(), "b".to_string()];
        assert!(Dataset::new(
            vec![sample(0, 0.0), sample(1, 1.0)],
            names.clone(),
            Modality::Image
        )
        .is_ok());
        assert!(Dataset::new(vec![sample(0, 0.0)], names.clone(), Modality::Image).is_err());
        assert!(Dataset::subset_of(vec![sample(0, 0.0)], names.clone(), Modality::Image).is_ok());
        assert!(Dataset::new(
            vec![sample(0, 0.0), sample(2, 0.0)],
            names.clone(),
            Modality::Image
        )
        .is_err());
        let odd = Sample {
            image: Image::filled(3, 5, 5, 0.0),
            label: 1,
        };
        assert!(Dataset::new(vec![sample(0, 0.0), odd], names, Modality::Image).is_err());
        let dup = vec!["a".to_string(), "a".to_string()];
        assert!(Dataset::new(vec![sample(0, 0.0), sample(1, 0.0)], dup, Modality::Image).is_err());
    }

    #[test]
    fn pseudo_modality_needs_square_single_channel() {
        let names = vec!["a".to_string()];
        assert!(Dataset::new(vec![sample(0, 0.0)], names.clone(), Modality::PseudoImage).is_err());
        let m = Sample {
            image: Image::filled(1, 4, 4, 0.0),
            label: 0,
        };
        assert!(Dataset::new(vec![m], names, Modality::PseudoImage).is_ok());
    }
}
