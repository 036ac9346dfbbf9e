use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::ImageTensor;
use crate::error::{Error, Result};

/// Pose tag that marks the frontal image used for single-image galleries.
pub const FRONTAL_POSE: &str = "frontal";

/// Attribute tokens the pipeline knows about. Others are kept but warned on.
pub const KNOWN_ATTRIBUTES: &[&str] = &["eyeglasses", "expression", "illumination", "occlusion"];

/// An aligned thermal/visible pair of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    /// Single-channel thermal image.
    pub thermal: ImageTensor,
    /// Three-channel visible image.
    pub visible: ImageTensor,
    pub subject_id: String,
    pub pose_tag: String,
    pub attributes: BTreeSet<String>,
    pub thermal_path: String,
    pub visible_path: String,
}

impl PairedSample {
    pub fn new(
        thermal: ImageTensor,
        visible: ImageTensor,
        subject_id: impl Into<String>,
        pose_tag: impl Into<String>,
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        if subject_id.is_empty() {
            return Err(Error::invalid("subject id must be non-empty"));
        }
        if !thermal.same_size(&visible) {
            return Err(Error::PairIntegrity(format!(
                "subject {subject_id}: thermal {}x{} vs visible {}x{}",
                thermal.height(),
                thermal.width(),
                visible.height(),
                visible.width()
            )));
        }
        Ok(PairedSample {
            thermal,
            visible,
            subject_id,
            pose_tag: pose_tag.into(),
            attributes: BTreeSet::new(),
            thermal_path: String::new(),
            visible_path: String::new(),
        })
    }

    pub fn with_attributes<I, S>(mut self, attrs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.attributes = attrs.into_iter().map(Into::into).collect();
        self
    }

    pub fn has_attribute(&self, attr: &str) -> bool {
        self.attributes.contains(attr)
    }
}

/// One row of the dataset manifest. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub thermal: String,
    pub visible: String,
    pub subject: String,
    pub pose: String,
    #[serde(default)]
    pub attributes: Vec<String>,
}

pub fn read_manifest(manifest_path: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::Load {
        path: manifest_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Load {
        path: manifest_path.to_path_buf(),
        reason: format!("malformed manifest: {e}"),
    })
}

/// Hex SHA-256 of the manifest bytes, recorded in run manifests.
pub fn manifest_sha256(manifest_path: &Path) -> Result<String> {
    let bytes = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Loads every manifest row as a [`PairedSample`] at `resolution`×`resolution`.
pub fn load_paired_dataset(manifest_path: &Path, resolution: usize) -> Result<Vec<PairedSample>> {
    let rows = read_manifest(manifest_path)?;
    let base = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    rows.iter()
        .enumerate()
        .map(|(i, row)| load_row(&base, i, row, resolution))
        .collect()
}

fn load_row(base: &Path, index: usize, row: &ManifestRow, resolution: usize) -> Result<PairedSample> {
    let thermal_path = base.join(&row.thermal);
    let visible_path = base.join(&row.visible);
    for p in [&thermal_path, &visible_path] {
        if !p.is_file() {
            return Err(Error::Load {
                path: p.clone(),
                reason: format!("manifest row {index} (subject {}) references a missing file", row.subject),
            });
        }
    }
    let dims = |p: &Path| {
        image::image_dimensions(p).map_err(|e| Error::Load {
            path: p.to_path_buf(),
            reason: format!("manifest row {index}: {e}"),
        })
    };
    let (td, vd) = (dims(&thermal_path)?, dims(&visible_path)?);
    if td != vd {
        return Err(Error::PairIntegrity(format!(
            "manifest row {index}: thermal {}x{} vs visible {}x{}",
            td.0, td.1, vd.0, vd.1
        )));
    }
    for attr in &row.attributes {
        if !KNOWN_ATTRIBUTES.contains(&attr.as_str()) {
            log::warn!("manifest row {index}: unknown attribute token `{attr}` kept as-is");
        }
    }
    let thermal = ImageTensor::load(&thermal_path, resolution, 1)?;
    let visible = ImageTensor::load(&visible_path, resolution, 3)?;
    let mut sample = PairedSample::new(thermal, visible, row.subject.clone(), row.pose.clone())?
        .with_attributes(row.attributes.iter().cloned());
    sample.thermal_path = row.thermal.clone();
    sample.visible_path = row.visible.clone();
    Ok(sample)
}

/// Distinct subject ids in sorted order.
pub fn subjects_of(samples: &[PairedSample]) -> BTreeSet<String> {
    samples.iter().map(|s| s.subject_id.clone()).collect()
}
