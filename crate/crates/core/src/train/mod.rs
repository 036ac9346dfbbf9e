//! Training loops for the GAN models and the patch baseline, plus
//! inference-time transformation.

mod adam;
mod gan;
mod patches;
mod run;
mod transform;

pub use adam::Adam;
pub use gan::{train_step_gan, GanTrainer, StepState};
pub use patches::{extract_patches, extract_patches_covering, reassemble_patches, Patch, PatchTrainer};
pub use run::{train, TrainOutcome, LOSS_LOG_FILE};
pub use transform::{transform, transform_with, TransformModel};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::AugmentOp;
use crate::error::{Error, Result};
use crate::losses::{GeneratorAdvForm, LossWeights};
use crate::nets::{DiscriminatorSpec, GeneratorSpec, PatchNetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Tvgan,
    Pix2pix,
    Patch,
    Plain,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Tvgan, ModelKind::Pix2pix, ModelKind::Patch, ModelKind::Plain];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Tvgan => "tvgan",
            ModelKind::Pix2pix => "pix2pix",
            ModelKind::Patch => "patch",
            ModelKind::Plain => "plain",
        }
    }

    pub fn is_gan(self) -> bool {
        matches!(self, ModelKind::Tvgan | ModelKind::Pix2pix)
    }

    /// Default epoch budget per model.
    pub fn default_epochs(self) -> usize {
        match self {
            ModelKind::Tvgan => 65,
            ModelKind::Pix2pix => 85,
            ModelKind::Patch => 108,
            ModelKind::Plain => 1,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model kind `{s}` (expected tvgan, pix2pix, patch or plain)")))
    }
}

/// Network sizes. The defaults are the full-scale architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub resolution: usize,
    pub gen_depth: usize,
    pub gen_base_channels: usize,
    pub disc_trunk_layers: usize,
    pub disc_base_channels: usize,
    pub patch: PatchNetSpec,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            resolution: 256,
            gen_depth: 8,
            gen_base_channels: 64,
            disc_trunk_layers: 4,
            disc_base_channels: 64,
            patch: PatchNetSpec::default(),
        }
    }
}

impl ArchConfig {
    pub fn generator(&self) -> GeneratorSpec {
        GeneratorSpec::new(self.resolution, self.gen_depth, self.gen_base_channels)
    }

    pub fn discriminator(&self, num_subjects: usize) -> DiscriminatorSpec {
        DiscriminatorSpec {
            trunk_layers: self.disc_trunk_layers,
            base_channels: self.disc_base_channels,
            ..DiscriminatorSpec::new(self.resolution, num_subjects)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub model_kind: ModelKind,
    pub augmentation: BTreeSet<AugmentOp>,
    /// Checkpoint interval in epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub arch: ArchConfig,
    /// Include the generated-class term for fake pairs in the discriminator
    /// identity loss.
    pub id_fake_term: bool,
    pub g_adv_form: GeneratorAdvForm,
    /// Extraction stride for patch-baseline training.
    pub patch_stride: usize,
    /// Keep dropout active when transforming evaluation queries.
    pub stochastic_eval: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_kind(ModelKind::Tvgan)
    }
}

impl TrainConfig {
    pub fn for_kind(kind: ModelKind) -> Self {
        let weights = match kind {
            ModelKind::Pix2pix => LossWeights {
                lambda2: 0.0,
                ..LossWeights::default()
            },
            _ => LossWeights::default(),
        };
        TrainConfig {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 1,
            epochs: kind.default_epochs(),
            weights,
            seed: 0,
            model_kind: kind,
            augmentation: [AugmentOp::Hflip, AugmentOp::Rotate, AugmentOp::Crop].into(),
            checkpoint_every: 5,
            arch: ArchConfig::default(),
            id_fake_term: true,
            g_adv_form: GeneratorAdvForm::NonSaturating,
            patch_stride: 12,
            stochastic_eval: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::invalid(format!("beta1 must lie in [0, 1), got {}", self.beta1)));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid(format!("beta2 must lie in [0, 1), got {}", self.beta2)));
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps must be > 0"));
        }
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.patch_stride < 1 {
            return Err(Error::invalid("patch_stride must be >= 1"));
        }
        self.weights.validate()?;
        match self.model_kind {
            ModelKind::Tvgan | ModelKind::Pix2pix => self.arch.generator().validate()?,
            ModelKind::Patch => self.arch.patch.validate()?,
            ModelKind::Plain => {}
        }
        Ok(())
    }

    /// Whether the identity head takes part in training.
    pub fn uses_identity(&self) -> bool {
        self.model_kind == ModelKind::Tvgan
    }
}

/// Mixes a base seed with a stream tag and index into an independent seed.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(mix(base) ^ stream) ^ index)
}

/// Seed streams used by the trainers.
pub(crate) mod streams {
    pub const GENERATOR_INIT: u64 = 1;
    pub const DISCRIMINATOR_INIT: u64 = 2;
    pub const PATCH_INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const AUGMENT: u64 = 5;
    pub const DROPOUT: u64 = 6;
}
