//! Layer primitives with explicit forward caches and backward passes.
//!
//! Feature maps are `(channels, height, width)` arrays of one sample.
//! Convolutions lower to GEMM through im2col/col2im.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, Ix2};
use rand::Rng;

use super::params::{Grads, ParamId, ParamStore};

pub const INIT_STD: f64 = 0.02;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;

fn matrix(store: &ParamStore, id: ParamId, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    store
        .get(id)
        .view()
        .into_shape_with_order((rows, cols))
        .expect("parameter is contiguous")
}

fn grad_matrix(grads: &mut Grads, id: ParamId, rows: usize, cols: usize) -> ndarray::ArrayViewMut2<'_, f64> {
    grads
        .get_mut(id)
        .view_mut()
        .into_shape_with_order((rows, cols))
        .expect("gradient is contiguous")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    /// Output side of a convolution over an input side `n`.
    pub fn conv_out(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.pad;
        (padded >= self.k).then(|| (padded - self.k) / self.stride + 1)
    }

    /// Output side of a transposed convolution over an input side `n`.
    pub fn convt_out(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.k - 2 * self.pad
    }
}

/// Unfolds `(c, h, w)` into `(c*k*k, oh*ow)` patch columns.
fn im2col(x: &Array3<f64>, g: Geometry, oh: usize, ow: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let k = g.k;
    let mut cols = Array2::zeros((c * k * k, oh * ow));
    let xs = x.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = ci * h * w + iy as usize * w;
                    let dst = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cs[dst + ox] = xs[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds columns back, summing overlaps.
fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize, g: Geometry, oh: usize, ow: usize) -> Array3<f64> {
    let k = g.k;
    let mut x = Array3::zeros((c, h, w));
    let xs = x.as_slice_mut().expect("fresh array");
    let cs = cols.as_standard_layout();
    let cs = cs.as_slice().expect("standard layout");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = ci * h * w + iy as usize * w;
                    let src = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            xs[dst + ix as usize] += cs[src + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn add_channel_bias(out: &mut Array3<f64>, bias: &ndarray::ArrayD<f64>) {
    for (mut plane, &b) in out.outer_iter_mut().zip(bias.iter()) {
        plane += b;
    }
}

fn accumulate_channel_bias(grads: &mut Grads, id: ParamId, dout: &Array3<f64>) {
    let gb = grads.get_mut(id);
    for (g, plane) in gb.iter_mut().zip(dout.outer_iter()) {
        *g += plane.sum();
    }
}

/// 2-D convolution, weight `(cout, cin, k, k)`, bias `(cout)`.
#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub geo: Geometry,
}

pub(crate) struct ConvCache {
    cols: Array2<f64>,
    in_dim: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), &[cout, cin, k, k], 0.0, INIT_STD, rng);
        let bias = store.add_zeros(format!("{name}.bias"), &[cout]);
        Conv2d {
            weight,
            bias,
            cin,
            cout,
            geo: Geometry { k, stride, pad },
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.cin);
        let oh = self.geo.conv_out(h).expect("validated geometry");
        let ow = self.geo.conv_out(w).expect("validated geometry");
        let cols = im2col(x, self.geo, oh, ow);
        let wm = matrix(store, self.weight, self.cout, self.cin * self.geo.k * self.geo.k);
        let out = wm.dot(&cols);
        let mut out = out.into_shape_with_order((self.cout, oh, ow)).expect("sizes agree");
        add_channel_bias(&mut out, store.get(self.bias));
        (
            out,
            ConvCache {
                cols,
                in_dim: (c, h, w),
                out_hw: (oh, ow),
            },
        )
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &ConvCache,
        dout: &Array3<f64>,
        grads: Option<&mut Grads>,
        need_dx: bool,
    ) -> Option<Array3<f64>> {
        let (oh, ow) = cache.out_hw;
        let kk = self.cin * self.geo.k * self.geo.k;
        let d2 = dout
            .view()
            .into_shape_with_order((self.cout, oh * ow))
            .expect("contiguous gradient");
        if let Some(grads) = grads {
            accumulate_channel_bias(grads, self.bias, dout);
            let mut gw = grad_matrix(grads, self.weight, self.cout, kk);
            general_mat_mul(1.0, &d2, &cache.cols.t(), 1.0, &mut gw);
        }
        need_dx.then(|| {
            let wm = matrix(store, self.weight, self.cout, kk);
            let dcols = wm.t().dot(&d2);
            let (c, h, w) = cache.in_dim;
            col2im(&dcols, c, h, w, self.geo, oh, ow)
        })
    }
}

/// Transposed convolution, weight `(cin, cout, k, k)`, bias `(cout)`.
#[derive(Debug, Clone)]
pub(crate) struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub geo: Geometry,
}

pub(crate) struct ConvTCache {
    input: Array3<f64>,
    out_hw: (usize, usize),
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), &[cin, cout, k, k], 0.0, INIT_STD, rng);
        let bias = store.add_zeros(format!("{name}.bias"), &[cout]);
        ConvTranspose2d {
            weight,
            bias,
            cin,
            cout,
            geo: Geometry { k, stride, pad },
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array3<f64>) -> (Array3<f64>, ConvTCache) {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.cin);
        let (oh, ow) = (self.geo.convt_out(h), self.geo.convt_out(w));
        let ckk = self.cout * self.geo.k * self.geo.k;
        let wm = matrix(store, self.weight, self.cin, ckk);
        let x2 = x.view().into_shape_with_order((c, h * w)).expect("contiguous input");
        let cols = wm.t().dot(&x2);
        let mut out = col2im(&cols, self.cout, oh, ow, self.geo, h, w);
        add_channel_bias(&mut out, store.get(self.bias));
        (
            out,
            ConvTCache {
                input: x.clone(),
                out_hw: (oh, ow),
            },
        )
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &ConvTCache,
        dout: &Array3<f64>,
        grads: Option<&mut Grads>,
        need_dx: bool,
    ) -> Option<Array3<f64>> {
        let (c, h, w) = cache.input.dim();
        let ckk = self.cout * self.geo.k * self.geo.k;
        debug_assert_eq!(dout.dim(), (self.cout, cache.out_hw.0, cache.out_hw.1));
        let dcols = im2col(dout, self.geo, h, w);
        if let Some(grads) = grads {
            accumulate_channel_bias(grads, self.bias, dout);
            let x2 = cache
                .input
                .view()
                .into_shape_with_order((c, h * w))
                .expect("contiguous input");
            let mut gw = grad_matrix(grads, self.weight, self.cin, ckk);
            general_mat_mul(1.0, &x2, &dcols.t(), 1.0, &mut gw);
        }
        need_dx.then(|| {
            let wm = matrix(store, self.weight, self.cin, ckk);
            wm.dot(&dcols)
                .into_shape_with_order((c, h, w))
                .expect("sizes agree")
        })
    }
}

/// Per-sample, per-channel normalization with affine scale and shift.
#[derive(Debug, Clone)]
pub(crate) struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub(crate) struct NormCache {
    xhat: Array3<f64>,
    inv_std: Array1<f64>,
}

impl InstanceNorm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let gamma = store.add_normal(format!("{name}.gamma"), &[channels], 1.0, INIT_STD, rng);
        let beta = store.add_zeros(format!("{name}.beta"), &[channels]);
        InstanceNorm { gamma, beta }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array3<f64>) -> (Array3<f64>, NormCache) {
        let (c, _, _) = x.dim();
        let gamma = store.get(self.gamma);
        let beta = store.get(self.beta);
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(c);
        let mut out = Array3::zeros(x.raw_dim());
        for ch in 0..c {
            let mut plane = xhat.index_axis_mut(Axis(0), ch);
            let n = plane.len() as f64;
            let mean = plane.sum() / n;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            plane.mapv_inplace(|v| (v - mean) * is);
            inv_std[ch] = is;
            let (g, b) = (gamma[ch], beta[ch]);
            out.index_axis_mut(Axis(0), ch)
                .zip_mut_with(&plane, |o, &xh| *o = g * xh + b);
        }
        (out, NormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &NormCache,
        dout: &Array3<f64>,
        mut grads: Option<&mut Grads>,
    ) -> Array3<f64> {
        let gamma = store.get(self.gamma);
        let c = dout.dim().0;
        let mut dx = Array3::zeros(dout.raw_dim());
        for ch in 0..c {
            let dy = dout.index_axis(Axis(0), ch);
            let xh = cache.xhat.index_axis(Axis(0), ch);
            let n = dy.len() as f64;
            let sum_dy = dy.sum();
            let sum_dy_xh: f64 = dy.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
            if let Some(g) = grads.as_deref_mut() {
                g.get_mut(self.gamma)[ch] += sum_dy_xh;
                g.get_mut(self.beta)[ch] += sum_dy;
            }
            let scale = gamma[ch] * cache.inv_std[ch] / n;
            ndarray::Zip::from(dx.index_axis_mut(Axis(0), ch))
                .and(&dy)
                .and(&xh)
                .for_each(|d, &g, &x| *d = scale * (n * g - sum_dy - x * sum_dy_xh));
        }
        dx
    }
}

/// Fully connected layer, weight `(out, in)`, bias `(out)`.
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), &[outputs, inputs], 0.0, INIT_STD, rng);
        let bias = store.add_zeros(format!("{name}.bias"), &[outputs]);
        Linear {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array1<f64>) -> Array1<f64> {
        let w = store
            .get(self.weight)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-d weight");
        let b = store.get(self.bias);
        let mut y = w.dot(x);
        y.iter_mut().zip(b.iter()).for_each(|(y, b)| *y += b);
        y
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Array1<f64>,
        dy: &Array1<f64>,
        grads: Option<&mut Grads>,
    ) -> Array1<f64> {
        let w = store
            .get(self.weight)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-d weight");
        if let Some(g) = grads {
            let mut gw = grad_matrix(g, self.weight, self.outputs, self.inputs);
            for (i, &d) in dy.iter().enumerate() {
                gw.row_mut(i).scaled_add(d, x);
            }
            g.get_mut(self.bias)
                .iter_mut()
                .zip(dy.iter())
                .for_each(|(g, d)| *g += d);
        }
        w.t().dot(dy)
    }
}

pub(crate) fn leaky_relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

/// Backward of leaky ReLU given its input `x`.
pub(crate) fn leaky_relu_backward(x: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v <= 0.0 {
            *d *= LEAKY_SLOPE
        }
    });
    dx
}

pub(crate) fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

pub(crate) fn relu_backward(x: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v <= 0.0 {
            *d = 0.0
        }
    });
    dx
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Inverted dropout mask: entries are 0 or `1/(1-rate)`.
pub(crate) fn dropout_mask<R: Rng>(dim: (usize, usize, usize), rate: f64, rng: &mut R) -> Array3<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array3::from_shape_simple_fn(dim, || if rng.random::<f64>() < rate { 0.0 } else { keep })
}

pub(crate) fn concat_channels(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial sizes")
}

pub(crate) fn split_channels(x: &Array3<f64>, first: usize) -> (Array3<f64>, Array3<f64>) {
    (
        x.slice(s![..first, .., ..]).to_owned(),
        x.slice(s![first.., .., ..]).to_owned(),
    )
}

pub(crate) fn global_avg_pool(x: &Array3<f64>) -> Array1<f64> {
    let (_, h, w) = x.dim();
    x.sum_axis(Axis(2)).sum_axis(Axis(1)) / (h * w) as f64
}

pub(crate) fn global_avg_pool_backward(dy: &Array1<f64>, dim: (usize, usize, usize)) -> Array3<f64> {
    let n = (dim.1 * dim.2) as f64;
    Array3::from_shape_fn(dim, |(c, _, _)| dy[c] / n)
}
