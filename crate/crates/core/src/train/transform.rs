use super::patches::{extract_patches_covering, reassemble_patches, Patch};
use super::ModelKind;
use crate::dataio::ImageTensor;
use crate::error::{Error, Result};
use crate::nets::{generator_forward, Generator, NetworkHandle, PatchTransformer};

/// A trained (or trivial) thermal-to-visible mapping.
#[derive(Debug, Clone)]
pub enum TransformModel {
    /// Identity mapping.
    Plain,
    /// TV-GAN or Pix2Pix generator.
    Gan { kind: ModelKind, generator: Generator },
    Patch(PatchTransformer),
}

impl TransformModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            TransformModel::Plain => ModelKind::Plain,
            TransformModel::Gan { kind, .. } => *kind,
            TransformModel::Patch(_) => ModelKind::Patch,
        }
    }

    pub fn from_handle(kind: ModelKind, handle: Option<NetworkHandle>) -> Result<Self> {
        match (kind, handle) {
            (ModelKind::Plain, None) => Ok(TransformModel::Plain),
            (ModelKind::Tvgan | ModelKind::Pix2pix, Some(NetworkHandle::Generator(generator))) => {
                Ok(TransformModel::Gan { kind, generator })
            }
            (ModelKind::Patch, Some(NetworkHandle::Patch(net))) => Ok(TransformModel::Patch(net)),
            (kind, None) => Err(Error::invalid(format!("model kind {kind} needs a network"))),
            (kind, Some(h)) => Err(Error::invalid(format!(
                "model kind {kind} cannot use a {} network",
                match h {
                    NetworkHandle::Generator(_) => "generator",
                    NetworkHandle::Discriminator(_) => "discriminator",
                    NetworkHandle::Patch(_) => "patch",
                }
            ))),
        }
    }

    pub fn handle(&self) -> Option<NetworkHandle> {
        match self {
            TransformModel::Plain => None,
            TransformModel::Gan { generator, .. } => Some(generator.clone().into()),
            TransformModel::Patch(p) => Some(p.clone().into()),
        }
    }
}

/// Deterministic translation of a thermal image into a 3-channel image.
pub fn transform(model: &TransformModel, thermal: &ImageTensor) -> Result<ImageTensor> {
    transform_with(model, thermal, None)
}

/// Like [`transform`], with generator dropout active when a seed is given.
pub fn transform_with(model: &TransformModel, thermal: &ImageTensor, dropout_seed: Option<u64>) -> Result<ImageTensor> {
    match model {
        TransformModel::Plain => Ok(thermal.to_rgb()),
        TransformModel::Gan { generator, .. } => {
            generator_forward(generator, thermal, dropout_seed.is_some(), dropout_seed.unwrap_or(0))
        }
        TransformModel::Patch(net) => {
            let p = net.spec().patch_size;
            let patches = extract_patches_covering(&thermal.to_rgb(), p, (p / 2).max(1))?;
            let out = patches
                .into_iter()
                .map(|patch| {
                    Ok(Patch {
                        data: net.forward(&patch.data)?,
                        ..patch
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            reassemble_patches(&out, thermal.height(), thermal.width())
        }
    }
}
