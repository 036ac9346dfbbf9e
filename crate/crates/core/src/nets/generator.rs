use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    concat_channels, dropout_mask, leaky_relu, leaky_relu_backward, relu, relu_backward, split_channels, Conv2d,
    ConvCache, ConvTCache, ConvTranspose2d, InstanceNorm, NormCache,
};
use super::params::{Grads, ParamStore};
use crate::error::{Error, Result};

pub const MAX_CHANNELS: usize = 512;

/// U-Net generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub resolution: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of stride-2 down/up sampling stages.
    pub depth: usize,
    pub base_channels: usize,
    /// Decoder stages with dropout, counted from the innermost (0).
    pub dropout_stages: Vec<usize>,
    pub dropout_rate: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec::new(256, 8, 64)
    }
}

impl GeneratorSpec {
    /// Spec with dropout on the three innermost decoder stages (or fewer
    /// when the depth does not provide three).
    pub fn new(resolution: usize, depth: usize, base_channels: usize) -> Self {
        GeneratorSpec {
            resolution,
            in_channels: 3,
            out_channels: 3,
            depth,
            base_channels,
            dropout_stages: (0..3.min(depth.saturating_sub(1))).collect(),
            dropout_rate: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::invalid("generator depth must be at least 1"));
        }
        if self.depth >= usize::BITS as usize || (1usize << self.depth) > self.resolution {
            return Err(Error::invalid(format!(
                "depth {} leaves no bottleneck at resolution {} (2^depth > resolution)",
                self.depth, self.resolution
            )));
        }
        if !self.resolution.is_multiple_of(1 << self.depth) {
            return Err(Error::invalid(format!(
                "resolution {} is not divisible by 2^{}",
                self.resolution, self.depth
            )));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout rate must lie in [0, 1)"));
        }
        if let Some(&s) = self.dropout_stages.iter().find(|&&s| s + 1 >= self.depth) {
            return Err(Error::invalid(format!(
                "dropout stage {s} does not exist for depth {}",
                self.depth
            )));
        }
        Ok(())
    }

    /// Channels produced by encoder stage `i`.
    pub fn encoder_channels(&self, i: usize) -> usize {
        (self.base_channels << i.min(16)).min(MAX_CHANNELS.max(self.base_channels))
    }

    /// Spatial side of the innermost feature map.
    pub fn bottleneck_size(&self) -> usize {
        self.resolution >> self.depth
    }
}

#[derive(Debug, Clone)]
pub(crate) struct UNet {
    pub spec: GeneratorSpec,
    enc: Vec<Conv2d>,
    enc_norm: Vec<Option<InstanceNorm>>,
    /// `dec[j]` produces the decoder output at encoder level `j - 1`;
    /// `dec[0]` is the output layer.
    dec: Vec<ConvTranspose2d>,
    dec_norm: Vec<Option<InstanceNorm>>,
    dropout: Vec<bool>,
}

struct EncStep {
    conv: ConvCache,
    norm: Option<NormCache>,
}

struct DecStep {
    /// Pre-activation input of the up-convolution.
    input: Array3<f64>,
    conv: ConvTCache,
    norm: Option<NormCache>,
    mask: Option<Array3<f64>>,
}

pub(crate) struct UNetCache {
    /// Encoder outputs after normalization.
    enc_out: Vec<Array3<f64>>,
    enc: Vec<EncStep>,
    /// Indexed like `UNet::dec`.
    dec: Vec<Option<DecStep>>,
    output: Array3<f64>,
}

impl UNetCache {
    pub fn output(&self) -> &Array3<f64> {
        &self.output
    }
}

/// Ablations of the innermost path used to probe skip connections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    None,
    /// Zero the innermost encoder activation.
    ZeroBottleneck,
    /// Zero the innermost activation and every skip feature.
    ZeroBottleneckAndSkips,
}

impl UNet {
    pub fn build<R: Rng>(spec: &GeneratorSpec, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let d = spec.depth;
        let mut enc = Vec::with_capacity(d);
        let mut enc_norm = Vec::with_capacity(d);
        for i in 0..d {
            let cin = if i == 0 { spec.in_channels } else { spec.encoder_channels(i - 1) };
            let cout = spec.encoder_channels(i);
            enc.push(Conv2d::new(store, &format!("gen.enc{i}.conv"), cin, cout, 4, 2, 1, rng));
            let norm = (i >= 1 && i + 1 < d).then(|| InstanceNorm::new(store, &format!("gen.enc{i}.norm"), cout, rng));
            enc_norm.push(norm);
        }
        let mut dec = Vec::with_capacity(d);
        let mut dec_norm = Vec::with_capacity(d);
        for j in 0..d {
            let cin = if j == d - 1 {
                spec.encoder_channels(d - 1)
            } else {
                2 * spec.encoder_channels(j)
            };
            let cout = if j == 0 { spec.out_channels } else { spec.encoder_channels(j - 1) };
            dec.push(ConvTranspose2d::new(store, &format!("gen.dec{j}.convt"), cin, cout, 4, 2, 1, rng));
            let norm = (j >= 1).then(|| InstanceNorm::new(store, &format!("gen.dec{j}.norm"), cout, rng));
            dec_norm.push(norm);
        }
        let dropout = (0..d).map(|j| j >= 1 && spec.dropout_stages.contains(&(d - 1 - j))).collect();
        Ok(UNet {
            spec: spec.clone(),
            enc,
            enc_norm,
            dec,
            dec_norm,
            dropout,
        })
    }

    pub fn forward<R: Rng>(
        &self,
        store: &ParamStore,
        x: &Array3<f64>,
        mut dropout_rng: Option<&mut R>,
        ablation: Ablation,
    ) -> UNetCache {
        let d = self.spec.depth;
        let mut enc_out: Vec<Array3<f64>> = Vec::with_capacity(d);
        let mut enc = Vec::with_capacity(d);
        for i in 0..d {
            let input = if i == 0 { x.clone() } else { leaky_relu(&enc_out[i - 1]) };
            let (z, conv) = self.enc[i].forward(store, &input);
            let (z, norm) = match &self.enc_norm[i] {
                Some(n) => {
                    let (y, c) = n.forward(store, &z);
                    (y, Some(c))
                }
                None => (z, None),
            };
            enc_out.push(z);
            enc.push(EncStep { conv, norm });
        }
        match ablation {
            Ablation::None => {}
            Ablation::ZeroBottleneck => enc_out[d - 1].fill(0.0),
            Ablation::ZeroBottleneckAndSkips => enc_out.iter_mut().for_each(|e| e.fill(0.0)),
        }
        let mut dec: Vec<Option<DecStep>> = (0..d).map(|_| None).collect();
        let mut h = enc_out[d - 1].clone();
        for j in (1..d).rev() {
            let (u, conv) = self.dec[j].forward(store, &relu(&h));
            let (mut u, norm) = match &self.dec_norm[j] {
                Some(n) => {
                    let (y, c) = n.forward(store, &u);
                    (y, Some(c))
                }
                None => (u, None),
            };
            let mask = match (&mut dropout_rng, self.dropout[j]) {
                (Some(rng), true) => {
                    let m = dropout_mask(u.dim(), self.spec.dropout_rate, rng);
                    u *= &m;
                    Some(m)
                }
                _ => None,
            };
            let input = std::mem::replace(&mut h, concat_channels(&u, &enc_out[j - 1]));
            dec[j] = Some(DecStep { input, conv, norm, mask });
        }
        let (z, conv) = self.dec[0].forward(store, &relu(&h));
        let output = z.mapv(f64::tanh);
        dec[0] = Some(DecStep {
            input: h,
            conv,
            norm: None,
            mask: None,
        });
        UNetCache {
            enc_out,
            enc,
            dec,
            output,
        }
    }

    /// Backpropagates `dy` (gradient w.r.t. the output image). Returns the
    /// input gradient when `need_dx`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &UNetCache,
        dy: &Array3<f64>,
        mut grads: Option<&mut Grads>,
        need_dx: bool,
    ) -> Option<Array3<f64>> {
        let d = self.spec.depth;
        let mut d_enc: Vec<Array3<f64>> = cache.enc_out.iter().map(|e| Array3::zeros(e.raw_dim())).collect();

        // Output layer.
        let mut dz = dy.clone();
        dz.zip_mut_with(&cache.output, |g, &y| *g *= 1.0 - y * y);
        let step = cache.dec[0].as_ref().expect("output step cached");
        let d_act = self.dec[0]
            .backward(store, &step.conv, &dz, grads.as_deref_mut(), true)
            .expect("dx requested");
        let mut dh = relu_backward(&step.input, &d_act);

        for j in 1..d {
            // dh is the gradient of concat(u_j, enc_out[j-1]).
            let cu = self.dec[j].cout;
            let (mut du, de) = split_channels(&dh, cu);
            d_enc[j - 1] += &de;
            let step = cache.dec[j].as_ref().expect("decoder step cached");
            if let Some(m) = &step.mask {
                du *= m;
            }
            if let (Some(n), Some(nc)) = (&self.dec_norm[j], &step.norm) {
                du = n.backward(store, nc, &du, grads.as_deref_mut());
            }
            let d_act = self.dec[j]
                .backward(store, &step.conv, &du, grads.as_deref_mut(), true)
                .expect("dx requested");
            dh = relu_backward(&step.input, &d_act);
        }
        d_enc[d - 1] += &dh;

        let mut dx = None;
        for i in (0..d).rev() {
            let mut g = std::mem::replace(&mut d_enc[i], Array3::zeros((0, 0, 0)));
            if let (Some(n), Some(nc)) = (&self.enc_norm[i], &cache.enc[i].norm) {
                g = n.backward(store, nc, &g, grads.as_deref_mut());
            }
            let want = i > 0 || need_dx;
            let d_in = self.enc[i].backward(store, &cache.enc[i].conv, &g, grads.as_deref_mut(), want);
            match (i, d_in) {
                (0, d_in) => dx = d_in,
                (_, Some(d_in)) => {
                    let back = leaky_relu_backward(&cache.enc_out[i - 1], &d_in);
                    d_enc[i - 1] += &back;
                }
                _ => unreachable!("encoder input gradient requested"),
            }
        }
        dx
    }

    /// Output shapes of every layer, for architecture listings.
    pub fn layer_shapes(&self) -> Vec<(String, (usize, usize, usize))> {
        let r = self.spec.resolution;
        let mut out = Vec::new();
        for (i, c) in self.enc.iter().enumerate() {
            out.push((format!("enc{i}"), (c.cout, r >> (i + 1), r >> (i + 1))));
        }
        for j in (0..self.spec.depth).rev() {
            out.push((format!("dec{j}"), (self.dec[j].cout, r >> j, r >> j)));
        }
        out
    }
}

/// Seeded dropout source for stochastic forwards.
pub(crate) fn dropout_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x0005_eedd_2090_u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_matches_reference_layout() {
        let spec = GeneratorSpec::default();
        assert_eq!(spec.depth, 8);
        assert_eq!(spec.bottleneck_size(), 1);
        assert_eq!(spec.dropout_stages, vec![0, 1, 2]);
        let chans: Vec<_> = (0..8).map(|i| spec.encoder_channels(i)).collect();
        assert_eq!(chans, vec![64, 128, 256, 512, 512, 512, 512, 512]);
    }

    #[test]
    fn too_deep_for_resolution_is_rejected() {
        assert!(GeneratorSpec::new(64, 7, 8).validate().is_err());
        assert!(GeneratorSpec::new(64, 6, 8).validate().is_ok());
    }

    #[test]
    fn shallow_specs_clip_default_dropout() {
        assert_eq!(GeneratorSpec::new(16, 2, 4).dropout_stages, vec![0]);
        assert!(GeneratorSpec::new(16, 1, 4).dropout_stages.is_empty());
        let mut bad = GeneratorSpec::new(16, 2, 4);
        bad.dropout_stages = vec![1];
        assert!(bad.validate().is_err());
    }
}
