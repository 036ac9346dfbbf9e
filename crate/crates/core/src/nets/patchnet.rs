use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{relu, relu_backward, Conv2d, ConvCache, ConvTCache, ConvTranspose2d};
use super::params::{Grads, ParamStore};
use crate::error::{Error, Result};

/// Residual encoder-decoder over square patches: `layers/2` unpadded 3x3
/// convolutions followed by as many 3x3 transposed convolutions, with the
/// activation of layer `i` added to layer `layers - i` (`i = 0` is the input).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchNetSpec {
    pub patch_size: usize,
    pub layers: usize,
    pub features: usize,
    pub channels: usize,
}

impl Default for PatchNetSpec {
    fn default() -> Self {
        PatchNetSpec {
            patch_size: 25,
            layers: 20,
            features: 64,
            channels: 3,
        }
    }
}

impl PatchNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || !self.layers.is_multiple_of(2) {
            return Err(Error::invalid(format!("layer count {} must be even and positive", self.layers)));
        }
        if self.patch_size <= self.layers {
            return Err(Error::invalid(format!(
                "patch size {} too small for {} unpadded 3x3 layers",
                self.patch_size, self.layers
            )));
        }
        if self.features == 0 || self.channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        Ok(())
    }

    pub fn skip_connections(&self) -> usize {
        self.layers / 2
    }
}

#[derive(Debug, Clone)]
pub(crate) struct RedNet {
    pub spec: PatchNetSpec,
    enc: Vec<Conv2d>,
    dec: Vec<ConvTranspose2d>,
}

pub(crate) struct RedCache {
    /// `acts[i]` is the activation of layer `i` (0 = input) for `i <= layers/2`.
    acts: Vec<Array3<f64>>,
    enc: Vec<ConvCache>,
    /// Pre-activation sums of decoder layers.
    dec_pre: Vec<Array3<f64>>,
    dec: Vec<ConvTCache>,
}

impl RedCache {
    pub fn output(&self) -> &Array3<f64> {
        self.dec_pre.last().expect("at least one decoder layer")
    }
}

impl RedNet {
    pub fn build<R: Rng>(spec: &PatchNetSpec, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let half = spec.layers / 2;
        let f = spec.features;
        let enc = (0..half)
            .map(|i| {
                let cin = if i == 0 { spec.channels } else { f };
                Conv2d::new(store, &format!("patch.conv{}", i + 1), cin, f, 3, 1, 0, rng)
            })
            .collect();
        let dec = (0..half)
            .map(|j| {
                let cout = if j + 1 == half { spec.channels } else { f };
                ConvTranspose2d::new(store, &format!("patch.deconv{}", half + j + 1), f, cout, 3, 1, 0, rng)
            })
            .collect();
        Ok(RedNet {
            spec: spec.clone(),
            enc,
            dec,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Array3<f64>) -> RedCache {
        let half = self.spec.layers / 2;
        let mut acts = vec![x.clone()];
        let mut enc = Vec::with_capacity(half);
        for conv in &self.enc {
            let (z, c) = conv.forward(store, acts.last().expect("non-empty"));
            acts.push(relu(&z));
            enc.push(c);
        }
        let mut dec_pre = Vec::with_capacity(half);
        let mut dec = Vec::with_capacity(half);
        let mut h = acts[half].clone();
        for (j, convt) in self.dec.iter().enumerate() {
            let (mut z, c) = convt.forward(store, &h);
            // decoder layer (half + j + 1) mirrors activation (half - j - 1)
            z += &acts[half - j - 1];
            h = relu(&z);
            dec_pre.push(z);
            dec.push(c);
        }
        RedCache { acts, enc, dec_pre, dec }
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &RedCache,
        dy: &Array3<f64>,
        mut grads: Option<&mut Grads>,
        need_dx: bool,
    ) -> Option<Array3<f64>> {
        let half = self.spec.layers / 2;
        let mut d_acts: Vec<Array3<f64>> = cache.acts.iter().map(|a| Array3::zeros(a.raw_dim())).collect();
        let mut dz = dy.clone();
        for j in (0..half).rev() {
            if j + 1 < half {
                dz = relu_backward(&cache.dec_pre[j], &dz);
            }
            d_acts[half - j - 1] += &dz;
            dz = self.dec[j]
                .backward(store, &cache.dec[j], &dz, grads.as_deref_mut(), true)
                .expect("dx requested");
        }
        d_acts[half] += &dz;
        for i in (0..half).rev() {
            // acts[i + 1] = relu(conv_i(acts[i]))
            let post = &cache.acts[i + 1];
            let mut g = std::mem::replace(&mut d_acts[i + 1], Array3::zeros((0, 0, 0)));
            g.zip_mut_with(post, |d, &a| {
                if a <= 0.0 {
                    *d = 0.0
                }
            });
            let want = i > 0 || need_dx;
            if let Some(d) = self.enc[i].backward(store, &cache.enc[i], &g, grads.as_deref_mut(), want) {
                d_acts[i] += &d;
            }
        }
        need_dx.then(|| std::mem::replace(&mut d_acts[0], Array3::zeros((0, 0, 0))))
    }
}
