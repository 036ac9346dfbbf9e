//! Dataset ingestion, splits, galleries, augmentation and the toy dataset.

mod augment;
mod gallery;
mod identity;
mod sample;
mod split;
mod tensor;
mod toy;

pub use augment::{apply_params, augment, AugmentOp, AugmentParams, MAX_ROTATION_DEG, MIN_CROP_FRACTION};
pub use gallery::{build_gallery_samples, GalleryImage, GallerySpec, PosePolicy, Protocol};
pub use identity::{encode_identity, IdentityEncoding};
pub use sample::{
    load_paired_dataset, manifest_sha256, read_manifest, subjects_of, ManifestRow, PairedSample,
    FRONTAL_POSE, KNOWN_ATTRIBUTES,
};
pub use split::{make_attribute_split, make_subject_disjoint_split, DatasetSplit};
pub use tensor::{from_u8, to_u8, ImageTensor, VALUE_MAX, VALUE_MIN};
pub use toy::synthesize_toy_dataset;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes samples as PNG pairs plus a manifest in `dir`.
pub fn write_dataset(samples: &[PairedSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("{}_{i:04}", s.subject_id);
        let thermal = format!("{stem}_thermal.png");
        let visible = format!("{stem}_visible.png");
        s.thermal.save_png(&dir.join(&thermal))?;
        s.visible.save_png(&dir.join(&visible))?;
        rows.push(ManifestRow {
            thermal,
            visible,
            subject: s.subject_id.clone(),
            pose: s.pose_tag.clone(),
            attributes: s.attributes.iter().cloned().collect(),
        });
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&rows)? + "\n").map_err(|e| Error::io(&path, e))
}
