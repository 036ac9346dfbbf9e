use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sample::{PairedSample, FRONTAL_POSE};
use super::tensor::ImageTensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    /// One frontal visible image per subject.
    A,
    /// Four visible images per subject covering distinct poses.
    B,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::A => f.write_str("A"),
            Protocol::B => f.write_str("B"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Protocol::A),
            "B" | "b" => Ok(Protocol::B),
            other => Err(Error::invalid(format!("unknown protocol `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PosePolicy {
    FrontalOnly,
    SeveralPoseAngles,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GallerySpec {
    pub protocol: Protocol,
    pub images_per_subject: usize,
    pub pose_policy: PosePolicy,
}

impl GallerySpec {
    pub fn for_protocol(protocol: Protocol) -> Self {
        match protocol {
            Protocol::A => GallerySpec {
                protocol,
                images_per_subject: 1,
                pose_policy: PosePolicy::FrontalOnly,
            },
            Protocol::B => GallerySpec {
                protocol,
                images_per_subject: 4,
                pose_policy: PosePolicy::SeveralPoseAngles,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if *self != GallerySpec::for_protocol(self.protocol) {
            return Err(Error::invalid(format!(
                "protocol {} requires {} images per subject",
                self.protocol,
                GallerySpec::for_protocol(self.protocol).images_per_subject
            )));
        }
        Ok(())
    }
}

/// A visible-spectrum enrollment image.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryImage {
    pub subject_id: String,
    pub pose_tag: String,
    pub image: ImageTensor,
    pub source_path: String,
    /// Position of the source pair in the input sample list.
    pub sample_index: usize,
}

impl GalleryImage {
    fn from_sample(sample_index: usize, s: &PairedSample) -> Self {
        GalleryImage {
            sample_index,
            subject_id: s.subject_id.clone(),
            pose_tag: s.pose_tag.clone(),
            image: s.visible.clone(),
            source_path: s.visible_path.clone(),
        }
    }
}

/// Selects the gallery images of every subject in `samples` (train and test).
///
/// Protocol A takes the first frontal sample in manifest order. Protocol B
/// keeps the first sample of each distinct pose and draws four poses with
/// the seeded generator.
pub fn build_gallery_samples(
    samples: &[PairedSample],
    spec: &GallerySpec,
    seed: u64,
) -> Result<Vec<GalleryImage>> {
    spec.validate()?;
    let mut by_subject: BTreeMap<&str, Vec<(usize, &PairedSample)>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_subject.entry(&s.subject_id).or_default().push((i, s));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(by_subject.len() * spec.images_per_subject);
    for (subject, group) in by_subject {
        match spec.protocol {
            Protocol::A => {
                let &(i, frontal) = group
                    .iter()
                    .find(|(_, s)| s.pose_tag == FRONTAL_POSE)
                    .ok_or_else(|| Error::invalid(format!("subject {subject} has no frontal image")))?;
                out.push(GalleryImage::from_sample(i, frontal));
            }
            Protocol::B => {
                let mut distinct: Vec<(usize, &PairedSample)> = Vec::new();
                for &(i, s) in &group {
                    if !distinct.iter().any(|(_, d)| d.pose_tag == s.pose_tag) {
                        distinct.push((i, s));
                    }
                }
                if distinct.len() < spec.images_per_subject {
                    return Err(Error::invalid(format!(
                        "subject {subject} has {} distinct poses, protocol B needs {}",
                        distinct.len(),
                        spec.images_per_subject
                    )));
                }
                let mut picked: Vec<usize> =
                    rand::seq::index::sample(&mut rng, distinct.len(), spec.images_per_subject).into_vec();
                picked.sort_unstable();
                out.extend(picked.into_iter().map(|k| GalleryImage::from_sample(distinct[k].0, distinct[k].1)));
            }
        }
    }
    Ok(out)
}
