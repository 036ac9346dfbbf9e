//! Differentiable networks: U-Net generator, shared-trunk multi-task
//! discriminator and the residual patch encoder-decoder baseline.

mod checkpoint;
mod discriminator;
mod generator;
mod layers;
mod params;
mod patchnet;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use discriminator::DiscriminatorSpec;
pub use generator::{Ablation, GeneratorSpec, MAX_CHANNELS};
pub use layers::{INIT_STD, LEAKY_SLOPE, NORM_EPS};
pub use params::{Grads, ParamId, ParamStore};
pub use patchnet::PatchNetSpec;

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::ImageTensor;
use crate::error::{Error, Result};
use discriminator::{DiscCache, MultiTaskDisc};
use generator::{dropout_rng, UNet, UNetCache};
use patchnet::{RedCache, RedNet};

/// Architecture description stored alongside checkpoint weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "spec", rename_all = "lowercase")]
pub enum NetSpec {
    Generator(GeneratorSpec),
    Discriminator(DiscriminatorSpec),
    Patch(PatchNetSpec),
}

fn check_image(t: &Array3<f64>, channels: usize, side: usize, what: &str) -> Result<()> {
    if t.dim() != (channels, side, side) {
        return Err(Error::shape(format!(
            "{what}: expected {channels}x{side}x{side}, got {:?}",
            t.dim()
        )));
    }
    Ok(())
}

/// U-Net generator with its parameters.
#[derive(Debug, Clone)]
pub struct Generator {
    params: ParamStore,
    net: UNet,
}

/// Forward trace of the generator, needed for backpropagation.
pub struct GeneratorTrace(UNetCache);

impl GeneratorTrace {
    pub fn output(&self) -> &Array3<f64> {
        self.0.output()
    }
}

impl Generator {
    pub fn spec(&self) -> &GeneratorSpec {
        &self.net.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    pub fn layer_shapes(&self) -> Vec<(String, (usize, usize, usize))> {
        self.net.layer_shapes()
    }

    /// Raw forward on a `(3, R, R)` array. Dropout is active when
    /// `dropout_seed` is given.
    pub fn trace(&self, x: &Array3<f64>, dropout_seed: Option<u64>) -> Result<GeneratorTrace> {
        self.trace_ablated(x, dropout_seed, Ablation::None)
    }

    pub fn trace_ablated(&self, x: &Array3<f64>, dropout_seed: Option<u64>, ablation: Ablation) -> Result<GeneratorTrace> {
        let s = &self.net.spec;
        check_image(x, s.in_channels, s.resolution, "generator input")?;
        let mut rng = dropout_seed.map(dropout_rng);
        Ok(GeneratorTrace(self.net.forward(&self.params, x, rng.as_mut(), ablation)))
    }

    /// Accumulates parameter gradients (when `grads` is given) for an output
    /// gradient `dy`; returns the input gradient when `need_dx`.
    pub fn backward(
        &self,
        trace: &GeneratorTrace,
        dy: &Array3<f64>,
        grads: Option<&mut Grads>,
        need_dx: bool,
    ) -> Option<Array3<f64>> {
        self.net.backward(&self.params, &trace.0, dy, grads, need_dx)
    }
}

pub fn build_generator(spec: &GeneratorSpec, seed: u64) -> Result<Generator> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let net = UNet::build(spec, &mut params, &mut rng)?;
    Ok(Generator { params, net })
}

/// Translates a thermal image. Single-channel inputs are replicated.
pub fn generator_forward(g: &Generator, x: &ImageTensor, stochastic: bool, seed: u64) -> Result<ImageTensor> {
    let rgb = x.to_rgb();
    let trace = g.trace(rgb.data(), stochastic.then_some(seed))?;
    ImageTensor::from_clamped(trace.output().clone())
}

/// Discriminator outputs for one conditioning pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscOutput {
    /// Patch realness probabilities, strictly inside (0, 1) for finite logits.
    pub realness: Array2<f64>,
    /// Unnormalized identity logits of length N+1.
    pub id_logits: Array1<f64>,
}

pub struct DiscriminatorTrace(DiscCache);

impl DiscriminatorTrace {
    pub fn realness(&self) -> &Array2<f64> {
        &self.0.realness
    }

    pub fn id_logits(&self) -> &Array1<f64> {
        &self.0.id_logits
    }

    pub fn output(&self) -> DiscOutput {
        DiscOutput {
            realness: self.0.realness.clone(),
            id_logits: self.0.id_logits.clone(),
        }
    }
}

/// Multi-task discriminator with its parameters.
#[derive(Debug, Clone)]
pub struct Discriminator {
    params: ParamStore,
    net: MultiTaskDisc,
}

impl Discriminator {
    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.net.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// Parameters of the shared trunk, consumed by both heads.
    pub fn trunk_params(&self) -> Vec<ParamId> {
        self.net.trunk_params()
    }

    pub fn realness_head_params(&self) -> Vec<ParamId> {
        self.net.realness_params()
    }

    pub fn identity_head_params(&self) -> Vec<ParamId> {
        self.net.identity_params()
    }

    pub fn trace(&self, x: &Array3<f64>, y: &Array3<f64>) -> Result<DiscriminatorTrace> {
        let s = &self.net.spec;
        check_image(x, s.image_channels, s.resolution, "discriminator input X")?;
        check_image(y, s.image_channels, s.resolution, "discriminator input Y")?;
        Ok(DiscriminatorTrace(self.net.forward(&self.params, x, y)))
    }

    /// Backpropagates gradients w.r.t. realness probabilities and identity
    /// logits. Returns `(dX, dY)` when `need_dx`.
    pub fn backward(
        &self,
        trace: &DiscriminatorTrace,
        d_realness: Option<&Array2<f64>>,
        d_logits: Option<&Array1<f64>>,
        grads: Option<&mut Grads>,
        need_dx: bool,
    ) -> Option<(Array3<f64>, Array3<f64>)> {
        self.net
            .backward(&self.params, &trace.0, d_realness, d_logits, grads, need_dx)
    }
}

pub fn build_discriminator(spec: &DiscriminatorSpec, seed: u64) -> Result<Discriminator> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let net = MultiTaskDisc::build(spec, &mut params, &mut rng)?;
    Ok(Discriminator { params, net })
}

/// Scores a (thermal, visible) pair. The visible image may be real or
/// generated; the network does not distinguish provenance.
pub fn discriminator_forward(d: &Discriminator, x: &ImageTensor, y: &ImageTensor) -> Result<DiscOutput> {
    let (x, y) = (x.to_rgb(), y.to_rgb());
    Ok(d.trace(x.data(), y.data())?.output())
}

/// Residual patch encoder-decoder with its parameters.
#[derive(Debug, Clone)]
pub struct PatchTransformer {
    params: ParamStore,
    net: RedNet,
}

pub struct PatchTrace(RedCache);

impl PatchTrace {
    pub fn output(&self) -> &Array3<f64> {
        self.0.output()
    }
}

impl PatchTransformer {
    pub fn spec(&self) -> &PatchNetSpec {
        &self.net.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    pub fn trace(&self, patch: &Array3<f64>) -> Result<PatchTrace> {
        let s = &self.net.spec;
        check_image(patch, s.channels, s.patch_size, "patch")?;
        Ok(PatchTrace(self.net.forward(&self.params, patch)))
    }

    pub fn backward(
        &self,
        trace: &PatchTrace,
        dy: &Array3<f64>,
        grads: Option<&mut Grads>,
        need_dx: bool,
    ) -> Option<Array3<f64>> {
        self.net.backward(&self.params, &trace.0, dy, grads, need_dx)
    }

    pub fn forward(&self, patch: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(self.trace(patch)?.output().clone())
    }
}

pub fn build_patch_transformer(spec: &PatchNetSpec, seed: u64) -> Result<PatchTransformer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let net = RedNet::build(spec, &mut params, &mut rng)?;
    Ok(PatchTransformer { params, net })
}

/// Any network together with its parameters.
#[derive(Debug, Clone)]
pub enum NetworkHandle {
    Generator(Generator),
    Discriminator(Discriminator),
    Patch(PatchTransformer),
}

impl NetworkHandle {
    pub fn build(spec: &NetSpec, seed: u64) -> Result<Self> {
        Ok(match spec {
            NetSpec::Generator(s) => NetworkHandle::Generator(build_generator(s, seed)?),
            NetSpec::Discriminator(s) => NetworkHandle::Discriminator(build_discriminator(s, seed)?),
            NetSpec::Patch(s) => NetworkHandle::Patch(build_patch_transformer(s, seed)?),
        })
    }

    pub fn spec(&self) -> NetSpec {
        match self {
            NetworkHandle::Generator(g) => NetSpec::Generator(g.spec().clone()),
            NetworkHandle::Discriminator(d) => NetSpec::Discriminator(d.spec().clone()),
            NetworkHandle::Patch(p) => NetSpec::Patch(p.spec().clone()),
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            NetworkHandle::Generator(g) => g.params(),
            NetworkHandle::Discriminator(d) => d.params(),
            NetworkHandle::Patch(p) => p.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            NetworkHandle::Generator(g) => g.params_mut(),
            NetworkHandle::Discriminator(d) => d.params_mut(),
            NetworkHandle::Patch(p) => p.params_mut(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params().parameter_count()
    }
}

impl From<Generator> for NetworkHandle {
    fn from(g: Generator) -> Self {
        NetworkHandle::Generator(g)
    }
}

impl From<Discriminator> for NetworkHandle {
    fn from(d: Discriminator) -> Self {
        NetworkHandle::Discriminator(d)
    }
}

impl From<PatchTransformer> for NetworkHandle {
    fn from(p: PatchTransformer) -> Self {
        NetworkHandle::Patch(p)
    }
}
