use ndarray::{s, Array2, Array3};

use super::{derive_seed, streams, Adam, ModelKind, TrainConfig};
use crate::dataio::{ImageTensor, PairedSample};
use crate::error::{Error, Result};
use crate::losses::mse_loss_grad;
use crate::nets::{build_patch_transformer, Grads, PatchTransformer};

/// A square crop and its top-left position.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub row: usize,
    pub col: usize,
    pub data: Array3<f64>,
}

fn offsets(dim: usize, patch: usize, stride: usize, cover: bool) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=(dim - patch) / stride).map(|i| i * stride).collect();
    if cover && v.last() != Some(&(dim - patch)) {
        v.push(dim - patch);
    }
    v
}

fn extract(image: &Array3<f64>, patch: usize, stride: usize, cover: bool) -> Result<Vec<Patch>> {
    let (_, h, w) = image.dim();
    if stride == 0 {
        return Err(Error::invalid("patch stride must be >= 1"));
    }
    if patch == 0 || patch > h || patch > w {
        return Err(Error::invalid(format!("patch size {patch} does not fit a {h}x{w} image")));
    }
    let rows = offsets(h, patch, stride, cover);
    let cols = offsets(w, patch, stride, cover);
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            out.push(Patch {
                row: r,
                col: c,
                data: image.slice(s![.., r..r + patch, c..c + patch]).to_owned(),
            });
        }
    }
    Ok(out)
}

/// Patches at every `(r * stride, c * stride)` that fits inside the image,
/// in row-major order.
pub fn extract_patches(image: &ImageTensor, patch_size: usize, stride: usize) -> Result<Vec<Patch>> {
    extract(image.data(), patch_size, stride, false)
}

/// Like [`extract_patches`], plus a border-aligned row and column of patches
/// when the stride grid leaves the right or bottom edge uncovered.
pub fn extract_patches_covering(image: &ImageTensor, patch_size: usize, stride: usize) -> Result<Vec<Patch>> {
    extract(image.data(), patch_size, stride, true)
}

/// Averages overlapping patches back onto an `height x width` canvas.
/// Values are clamped to the image range.
pub fn reassemble_patches(patches: &[Patch], height: usize, width: usize) -> Result<ImageTensor> {
    let channels = patches
        .first()
        .map(|p| p.data.dim().0)
        .ok_or_else(|| Error::invalid("no patches to reassemble"))?;
    let mut sum = Array3::<f64>::zeros((channels, height, width));
    let mut count = Array2::<u32>::zeros((height, width));
    for p in patches {
        let (c, ph, pw) = p.data.dim();
        if c != channels || p.row + ph > height || p.col + pw > width {
            return Err(Error::shape(format!(
                "patch {c}x{ph}x{pw} at ({}, {}) does not fit a {channels}x{height}x{width} canvas",
                p.row, p.col
            )));
        }
        sum.slice_mut(s![.., p.row..p.row + ph, p.col..p.col + pw]).zip_mut_with(&p.data, |a, &b| *a += b);
        count.slice_mut(s![p.row..p.row + ph, p.col..p.col + pw]).mapv_inplace(|n| n + 1);
    }
    if let Some(((r, c), _)) = count.indexed_iter().find(|(_, &n)| n == 0) {
        return Err(Error::invalid(format!("patches leave pixel ({r}, {c}) uncovered")));
    }
    for ((_, r, c), v) in sum.indexed_iter_mut() {
        *v /= count[[r, c]] as f64;
    }
    ImageTensor::from_clamped(sum)
}

/// Aligned (thermal, visible) training patches of one sample.
pub(crate) fn patch_pairs(sample: &PairedSample, patch: usize, stride: usize) -> Result<Vec<(Array3<f64>, Array3<f64>)>> {
    let x = extract_patches(&sample.thermal.to_rgb(), patch, stride)?;
    let y = extract_patches(&sample.visible.to_rgb(), patch, stride)?;
    Ok(x.into_iter().zip(y).map(|(a, b)| (a.data, b.data)).collect())
}

/// Patch-baseline network with its optimizer, trained with mean squared error.
#[derive(Debug, Clone)]
pub struct PatchTrainer {
    net: PatchTransformer,
    opt: Adam,
    steps: u64,
}

impl PatchTrainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.model_kind != ModelKind::Patch {
            return Err(Error::invalid(format!("{} is not the patch model", cfg.model_kind)));
        }
        let net = build_patch_transformer(&cfg.arch.patch, derive_seed(cfg.seed, streams::PATCH_INIT, 0))?;
        let opt = Adam::new(net.params(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
        Ok(PatchTrainer { net, opt, steps: 0 })
    }

    pub fn net(&self) -> &PatchTransformer {
        &self.net
    }

    pub fn into_net(self) -> PatchTransformer {
        self.net
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One Adam step on a batch of (input, target) patches. Returns the
    /// batch-mean MSE measured before the update.
    pub fn train_step(&mut self, batch: &[(Array3<f64>, Array3<f64>)]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let step = self.steps + 1;
        let mut grads = Grads::zeros_like(self.net.params());
        let mut loss = 0.0;
        for (x, y) in batch {
            let trace = self.net.trace(x)?;
            let (l, dy) = mse_loss_grad(y, trace.output())?;
            loss += l;
            self.net.backward(&trace, &dy, Some(&mut grads), false);
        }
        let scale = 1.0 / batch.len() as f64;
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::NonFinite { step, term: "mse".into() });
        }
        grads.scale(scale);
        if !grads.all_finite() {
            return Err(Error::NonFinite { step, term: "patch gradient".into() });
        }
        let ids: Vec<_> = self.net.params().ids().collect();
        self.opt.step(self.net.params_mut(), &grads, &ids);
        if let Some(name) = self.net.params().first_non_finite() {
            return Err(Error::NonFinite { step, term: format!("patch parameter {name}") });
        }
        self.steps += 1;
        Ok(loss)
    }
}
