use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::generator::MAX_CHANNELS;
use super::layers::{
    concat_channels, global_avg_pool, global_avg_pool_backward, leaky_relu, leaky_relu_backward, sigmoid,
    split_channels, Conv2d, ConvCache, InstanceNorm, Linear, NormCache,
};
use super::params::{Grads, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Shared-trunk discriminator with a patch realness head and an (N+1)-way
/// identity head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSpec {
    pub resolution: usize,
    /// Channels of each of the two conditioning images.
    pub image_channels: usize,
    pub trunk_layers: usize,
    pub base_channels: usize,
    /// Number of real training subjects; the identity head emits N+1 logits.
    pub num_subjects: usize,
}

impl DiscriminatorSpec {
    pub fn new(resolution: usize, num_subjects: usize) -> Self {
        DiscriminatorSpec {
            resolution,
            image_channels: 3,
            trunk_layers: 4,
            base_channels: 64,
            num_subjects,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_subjects < 1 {
            return Err(Error::invalid("the identity head needs at least one subject (N >= 1)"));
        }
        if self.trunk_layers == 0 || (1usize << self.trunk_layers.min(63)) > self.resolution {
            return Err(Error::invalid(format!(
                "{} stride-2 trunk stages do not fit resolution {}",
                self.trunk_layers, self.resolution
            )));
        }
        if !self.resolution.is_multiple_of(1 << self.trunk_layers) {
            return Err(Error::invalid("resolution must be divisible by 2^trunk_layers"));
        }
        if self.base_channels == 0 || self.image_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        Ok(())
    }

    pub fn trunk_channels(&self, t: usize) -> usize {
        (self.base_channels << t.min(16)).min(MAX_CHANNELS.max(self.base_channels))
    }

    /// Side of the realness score map.
    pub fn realness_size(&self) -> usize {
        self.resolution >> self.trunk_layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_subjects + 1
    }
}

#[derive(Debug, Clone)]
pub(crate) struct MultiTaskDisc {
    pub spec: DiscriminatorSpec,
    trunk: Vec<Conv2d>,
    trunk_norm: Vec<Option<InstanceNorm>>,
    realness: Conv2d,
    identity: Linear,
}

struct TrunkStep {
    conv: ConvCache,
    norm: Option<NormCache>,
    /// Pre-activation (post-norm) output.
    pre: Array3<f64>,
}

pub(crate) struct DiscCache {
    trunk: Vec<TrunkStep>,
    features: Array3<f64>,
    pooled: Array1<f64>,
    head: ConvCache,
    pub realness: Array2<f64>,
    pub id_logits: Array1<f64>,
}

impl MultiTaskDisc {
    pub fn build<R: Rng>(spec: &DiscriminatorSpec, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut trunk = Vec::with_capacity(spec.trunk_layers);
        let mut trunk_norm = Vec::with_capacity(spec.trunk_layers);
        for t in 0..spec.trunk_layers {
            let cin = if t == 0 { 2 * spec.image_channels } else { spec.trunk_channels(t - 1) };
            let cout = spec.trunk_channels(t);
            trunk.push(Conv2d::new(store, &format!("disc.trunk{t}.conv"), cin, cout, 4, 2, 1, rng));
            let side = spec.resolution >> (t + 1);
            let norm = (t >= 1 && side > 1).then(|| InstanceNorm::new(store, &format!("disc.trunk{t}.norm"), cout, rng));
            trunk_norm.push(norm);
        }
        let feat = spec.trunk_channels(spec.trunk_layers - 1);
        let realness = Conv2d::new(store, "disc.realness.conv", feat, 1, 3, 1, 1, rng);
        let identity = Linear::new(store, "disc.identity.linear", feat, spec.num_classes(), rng);
        Ok(MultiTaskDisc {
            spec: spec.clone(),
            trunk,
            trunk_norm,
            realness,
            identity,
        })
    }

    pub fn trunk_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (c, n) in self.trunk.iter().zip(&self.trunk_norm) {
            ids.extend([c.weight, c.bias]);
            if let Some(n) = n {
                ids.extend([n.gamma, n.beta]);
            }
        }
        ids
    }

    pub fn realness_params(&self) -> Vec<ParamId> {
        vec![self.realness.weight, self.realness.bias]
    }

    pub fn identity_params(&self) -> Vec<ParamId> {
        vec![self.identity.weight, self.identity.bias]
    }

    pub fn forward(&self, store: &ParamStore, x: &Array3<f64>, y: &Array3<f64>) -> DiscCache {
        let mut a = concat_channels(x, y);
        let mut trunk = Vec::with_capacity(self.trunk.len());
        for (conv, norm) in self.trunk.iter().zip(&self.trunk_norm) {
            let (z, cc) = conv.forward(store, &a);
            let (z, nc) = match norm {
                Some(n) => {
                    let (o, c) = n.forward(store, &z);
                    (o, Some(c))
                }
                None => (z, None),
            };
            a = leaky_relu(&z);
            trunk.push(TrunkStep { conv: cc, norm: nc, pre: z });
        }
        let (logit_map, head) = self.realness.forward(store, &a);
        let (_, h, w) = logit_map.dim();
        let realness = logit_map
            .into_shape_with_order((h, w))
            .expect("single channel")
            .mapv(sigmoid);
        let pooled = global_avg_pool(&a);
        let id_logits = self.identity.forward(store, &pooled);
        DiscCache {
            trunk,
            features: a,
            pooled,
            head,
            realness,
            id_logits,
        }
    }

    /// Backpropagates gradients w.r.t. the realness probabilities and the
    /// identity logits. Returns `(dX, dY)` when `need_dx`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &DiscCache,
        d_realness: Option<&Array2<f64>>,
        d_logits: Option<&Array1<f64>>,
        mut grads: Option<&mut Grads>,
        need_dx: bool,
    ) -> Option<(Array3<f64>, Array3<f64>)> {
        let mut da = Array3::zeros(cache.features.raw_dim());
        if let Some(dp) = d_realness {
            let (h, w) = dp.dim();
            let mut dz = dp.clone();
            dz.zip_mut_with(&cache.realness, |g, &p| *g *= p * (1.0 - p));
            let dz = dz.into_shape_with_order((1, h, w)).expect("single channel");
            let back = self
                .realness
                .backward(store, &cache.head, &dz, grads.as_deref_mut(), true)
                .expect("dx requested");
            da += &back;
        }
        if let Some(dl) = d_logits {
            let dp = self.identity.backward(store, &cache.pooled, dl, grads.as_deref_mut());
            da += &global_avg_pool_backward(&dp, cache.features.dim());
        }
        for t in (0..self.trunk.len()).rev() {
            let step = &cache.trunk[t];
            let mut dz = leaky_relu_backward(&step.pre, &da);
            if let (Some(n), Some(nc)) = (&self.trunk_norm[t], &step.norm) {
                dz = n.backward(store, nc, &dz, grads.as_deref_mut());
            }
            let want = t > 0 || need_dx;
            match self.trunk[t].backward(store, &step.conv, &dz, grads.as_deref_mut(), want) {
                Some(d) if t > 0 => da = d,
                Some(d) => return Some(split_channels(&d, self.spec.image_channels)),
                None => return None,
            }
        }
        None
    }
}
