use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{streams, Rng};

/// Per-class quotas for a scarce-regime split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    /// Labelled training samples per class, at most 5.
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_per_class: 1,
            val_per_class: 5,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub const MAX_TRAIN_PER_CLASS: usize = 5;

    pub fn validate(&self) -> Result<()> {
        if !(1..=Self::MAX_TRAIN_PER_CLASS).contains(&self.train_per_class) {
            return Err(Error::Config(format!(
                "split.train_per_class = {} must lie in 1..={}",
                self.train_per_class,
                Self::MAX_TRAIN_PER_CLASS
            )));
        }
        Ok(())
    }
}

/// Disjoint train / validation / test partition of a dataset.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl Split {
    /// SHA-256 over the three index lists; equal checksums mean equal splits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (tag, idx) in [
            ("train", &self.train_indices),
            ("val", &self.val_indices),
            ("test", &self.test_indices),
        ] {
            h.update(tag.as_bytes());
            h.update((idx.len() as u64).to_le_bytes());
            for &i in idx.iter() {
                h.update((i as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Draws `train_per_class` then `val_per_class` items of every class without
/// replacement; everything else becomes the test set.
pub fn scarce_split(ds: &Dataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let need = spec.train_per_class + spec.val_per_class;
    let mut rng = Rng::stream(spec.seed, streams::SPLIT);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (c, mut idx) in ds.indices_by_class().into_iter().enumerate() {
        if idx.len() < need {
            return Err(Error::Data(format!(
                "class '{}' has {} items but the split needs {need} ({} train + {} val)",
                ds.class_names()[c],
                idx.len(),
                spec.train_per_class,
                spec.val_per_class
            )));
        }
        rng.shuffle(&mut idx);
        train.extend_from_slice(&idx[..spec.train_per_class]);
        val.extend_from_slice(&idx[spec.train_per_class..need]);
        test.extend_from_slice(&idx[need..]);
    }
    test.sort_unstable();
    Ok(Split {
        train: ds.select(&train)?,
        val: ds.select(&val)?,
        test: ds.select(&test)?,
        train_indices: train,
        val_indices: val,
        test_indices: test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Image, Modality, Sample};

    fn dataset(classes: usize, per_class: usize) -> Dataset {
        let items = (0..classes * per_class)
            .map(|i| Sample {
                image: Image::filled(1, 2, 2, i as f32),
                label: i % classes,
            })
            .collect();
        let names = (0..classes).map(|c| format!("c{c:02}")).collect();
        Dataset::new(items, names, Modality::Image).unwrap()
    }

    #[test]
    fn quotas_and_partition() {
        let ds = dataset(14, 9);
        let split = scarce_split(&ds, &SplitSpec::default()).unwrap();
        assert_eq!(split.train.len(), 14);
        assert_eq!(split.val.len(), 70);
        assert_eq!(split.test.len(), 14 * 3);
        assert!(split.train.class_counts().iter().all(|&n| n == 1));
        assert!(split.val.class_counts().iter().all(|&n| n == 5));
        let mut all: Vec<usize> = split
            .train_indices
            .iter()
            .chain(&split.val_indices)
            .chain(&split.test_indices)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let ds = dataset(6, 10);
        let spec = SplitSpec::default();
        let a = scarce_split(&ds, &spec).unwrap();
        let b = scarce_split(&ds, &spec).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.train_indices, b.train_indices);
        let c = scarce_split(&ds, &SplitSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn infeasible_spec_is_rejected() {
        let ds = dataset(3, 5);
        assert!(scarce_split(&ds, &SplitSpec::default()).is_err());
        let spec = SplitSpec {
            train_per_class: 6,
            val_per_class: 0,
            seed: 0,
        };
        assert!(scarce_split(&dataset(2, 20), &spec).is_err());
        let spec = SplitSpec {
            train_per_class: 0,
            ..SplitSpec::default()
        };
        assert!(scarce_split(&dataset(2, 20), &spec).is_err());
    }
}
