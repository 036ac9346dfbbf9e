use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sample::{subjects_of, PairedSample};
use crate::error::{Error, Result};

/// Subject-disjoint partition of a dataset. Serialized as the split file
/// `{"seed": int, "train": [...], "test": [...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSplit {
    pub seed: u64,
    #[serde(rename = "train")]
    pub train_subjects: BTreeSet<String>,
    #[serde(rename = "test")]
    pub test_subjects: BTreeSet<String>,
}

impl DatasetSplit {
    pub fn is_disjoint(&self) -> bool {
        self.train_subjects.is_disjoint(&self.test_subjects)
    }

    pub fn train_samples<'a>(&self, samples: &'a [PairedSample]) -> Vec<&'a PairedSample> {
        samples
            .iter()
            .filter(|s| self.train_subjects.contains(&s.subject_id))
            .collect()
    }

    pub fn test_samples<'a>(&self, samples: &'a [PairedSample]) -> Vec<&'a PairedSample> {
        samples
            .iter()
            .filter(|s| self.test_subjects.contains(&s.subject_id))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let split: DatasetSplit = serde_json::from_str(&text)?;
        if !split.is_disjoint() {
            return Err(Error::invalid(format!(
                "split file {} has subjects in both train and test",
                path.display()
            )));
        }
        Ok(split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Draws `n_test_subjects` test subjects uniformly without replacement.
pub fn make_subject_disjoint_split(
    samples: &[PairedSample],
    n_test_subjects: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    let subjects: Vec<String> = subjects_of(samples).into_iter().collect();
    if n_test_subjects >= subjects.len() {
        return Err(Error::invalid(format!(
            "cannot hold out {n_test_subjects} of {} subjects",
            subjects.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: BTreeSet<usize> = rand::seq::index::sample(&mut rng, subjects.len(), n_test_subjects)
        .into_iter()
        .collect();
    let (test, train): (Vec<_>, Vec<_>) = subjects
        .into_iter()
        .enumerate()
        .partition(|(i, _)| picked.contains(i));
    Ok(DatasetSplit {
        seed,
        train_subjects: train.into_iter().map(|(_, s)| s).collect(),
        test_subjects: test.into_iter().map(|(_, s)| s).collect(),
    })
}

/// Sends every subject with at least one sample tagged `attribute` to test.
pub fn make_attribute_split(samples: &[PairedSample], attribute: &str) -> Result<DatasetSplit> {
    let all = subjects_of(samples);
    let tagged: BTreeSet<String> = samples
        .iter()
        .filter(|s| s.has_attribute(attribute))
        .map(|s| s.subject_id.clone())
        .collect();
    if tagged.is_empty() {
        return Err(Error::invalid(format!("no subject carries attribute `{attribute}`")));
    }
    let train: BTreeSet<String> = all.difference(&tagged).cloned().collect();
    if train.is_empty() {
        return Err(Error::invalid(format!(
            "every subject carries attribute `{attribute}`; the training split would be empty"
        )));
    }
    Ok(DatasetSplit {
        seed: 0,
        train_subjects: train,
        test_subjects: tagged,
    })
}
