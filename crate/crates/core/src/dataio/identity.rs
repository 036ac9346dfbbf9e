use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Maps the N training subjects onto `0..N`; index `N` is reserved for
/// generated images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityEncoding {
    subject_to_index: BTreeMap<String, usize>,
}

impl IdentityEncoding {
    /// Indices follow the sorted order of the subject ids.
    pub fn from_subjects<I, S>(subjects: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut ids: Vec<String> = subjects.into_iter().map(Into::into).collect();
        ids.sort();
        ids.dedup();
        if ids.is_empty() {
            return Err(Error::invalid("identity encoding needs at least one subject"));
        }
        let subject_to_index = ids.into_iter().enumerate().map(|(i, s)| (s, i)).collect();
        Ok(IdentityEncoding { subject_to_index })
    }

    /// Number of real subjects (N).
    pub fn num_subjects(&self) -> usize {
        self.subject_to_index.len()
    }

    /// Length of the label vector (N + 1).
    pub fn num_classes(&self) -> usize {
        self.num_subjects() + 1
    }

    pub fn generated_class(&self) -> usize {
        self.num_subjects()
    }

    pub fn index_of(&self, subject_id: &str) -> Result<usize> {
        self.subject_to_index
            .get(subject_id)
            .copied()
            .ok_or_else(|| Error::UnknownSubject(subject_id.to_string()))
    }

    pub fn contains(&self, subject_id: &str) -> bool {
        self.subject_to_index.contains_key(subject_id)
    }

    pub fn subjects(&self) -> impl Iterator<Item = (&str, usize)> {
        self.subject_to_index.iter().map(|(s, &i)| (s.as_str(), i))
    }

    /// One-hot label of length N+1 for a training subject.
    pub fn encode(&self, subject_id: &str) -> Result<Vec<f64>> {
        Ok(one_hot(self.num_classes(), self.index_of(subject_id)?))
    }

    /// One-hot label of the reserved generated class.
    pub fn encode_generated(&self) -> Vec<f64> {
        one_hot(self.num_classes(), self.generated_class())
    }
}

pub fn encode_identity(subject_id: &str, enc: &IdentityEncoding) -> Result<Vec<f64>> {
    enc.encode(subject_id)
}

fn one_hot(len: usize, hot: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[hot] = 1.0;
    v
}
