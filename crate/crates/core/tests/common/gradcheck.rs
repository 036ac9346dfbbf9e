//! Central finite-difference checks of every loss composed with tiny networks.

use ndarray::{Array1, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tvgan::losses::*;
use tvgan::nets::{
    build_discriminator, build_generator, build_patch_transformer, Discriminator, DiscriminatorSpec, Generator,
    GeneratorSpec, Grads, ParamId, ParamStore, PatchNetSpec, PatchTransformer,
};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
pub const MIN_PARAMS: usize = 50;
/// Gradients below this magnitude are compared absolutely.
const FLOOR: f64 = 1e-6;

const RES: usize = 16;
const SUBJECTS: usize = 3;
const LABEL: usize = 1;

#[derive(Debug)]
pub struct GradCheck {
    pub name: &'static str,
    pub checked: usize,
    pub worst: f64,
    pub worst_param: String,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.checked >= MIN_PARAMS && self.worst <= TOLERANCE
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

fn image(rng: &mut ChaCha8Rng, c: usize, side: usize) -> Array3<f64> {
    Array3::from_shape_fn((c, side, side), |_| rng.random_range(-0.9..0.9))
}

struct Fixture {
    g: Generator,
    d: Discriminator,
    x: Array3<f64>,
    y: Array3<f64>,
}

fn fixture(seed: u64) -> Fixture {
    let mut g = build_generator(&GeneratorSpec::new(RES, 2, 4), seed).unwrap();
    let mut ds = DiscriminatorSpec::new(RES, SUBJECTS);
    ds.trunk_layers = 2;
    ds.base_channels = 4;
    let mut d = build_discriminator(&ds, seed + 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    redraw(g.params_mut(), &mut rng);
    redraw(d.params_mut(), &mut rng);
    let x = image(&mut rng, 3, RES);
    let y = image(&mut rng, 3, RES);
    Fixture { g, d, x, y }
}

/// Redraws weights at unit fan-in scale and jitters gammas and biases.
/// The default init keeps activations of these tiny nets near zero, where
/// instance norm is strongly curved relative to the finite-difference step.
fn redraw(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        let (len, rows) = (t.len(), t.shape()[0]);
        if t.ndim() >= 2 {
            let std = (rows as f64 / len as f64).sqrt();
            t.mapv_inplace(|_| rng.random_range(-std..std) * 3f64.sqrt());
        } else {
            t.mapv_inplace(|v| v + rng.random_range(-0.2..0.2));
        }
    }
}

fn logits(a: &Array1<f64>) -> &[f64] {
    a.as_slice().unwrap()
}

/// Random scalar coordinates `(tensor, flat index)` of a store.
fn sample_coords(store: &ParamStore, n: usize, rng: &mut ChaCha8Rng) -> Vec<(ParamId, usize)> {
    let mut all: Vec<(ParamId, usize)> = store
        .iter()
        .flat_map(|(id, _, t)| (0..t.len()).map(move |i| (id, i)))
        .collect();
    all.shuffle(rng);
    all.truncate(n);
    all
}

fn compare<F>(
    name: &'static str,
    store: &mut ParamStore,
    grads: &Grads,
    seed: u64,
    mut loss: F,
) -> GradCheck
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = sample_coords(store, 64, &mut rng);
    let mut out = GradCheck {
        name,
        checked: 0,
        worst: 0.0,
        worst_param: String::new(),
    };
    for (id, i) in coords {
        let orig = store.get(id).as_slice().unwrap()[i];
        store.get_mut(id).as_slice_mut().unwrap()[i] = orig + STEP;
        let up = loss(store);
        store.get_mut(id).as_slice_mut().unwrap()[i] = orig - STEP;
        let down = loss(store);
        store.get_mut(id).as_slice_mut().unwrap()[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let analytic = grads.get(id).as_slice().unwrap()[i];
        let err = relative_error(analytic, numeric);
        out.checked += 1;
        if err > out.worst {
            out.worst = err;
            out.worst_param = format!("{}[{i}]: analytic {analytic:e}, numeric {numeric:e}", store.name(id));
        }
    }
    out
}

/// Discriminator objective `d_adv + lambda2 * d_id` on a real and a fixed fake pair.
fn discriminator_check(seed: u64) -> GradCheck {
    let Fixture { g, mut d, x, y } = fixture(seed);
    let fake = g.trace(&x, None).unwrap().output().clone();
    let lambda2 = 100.0;
    let loss = |d: &Discriminator| {
        let r = d.trace(&x, &y).unwrap();
        let f = d.trace(&x, &fake).unwrap();
        discriminator_adv_loss(r.realness(), f.realness()).unwrap()
            + lambda2
                * (softmax_cross_entropy(logits(r.id_logits()), LABEL).unwrap()
                    + softmax_cross_entropy(logits(f.id_logits()), SUBJECTS).unwrap())
    };
    let r = d.trace(&x, &y).unwrap();
    let f = d.trace(&x, &fake).unwrap();
    let (_, gr, gf) = discriminator_adv_loss_grad(r.realness(), f.realness()).unwrap();
    let lr = softmax_cross_entropy_grad(logits(r.id_logits()), LABEL).unwrap().1 * lambda2;
    let lf = softmax_cross_entropy_grad(logits(f.id_logits()), SUBJECTS).unwrap().1 * lambda2;
    let mut grads = Grads::zeros_like(d.params());
    d.backward(&r, Some(&gr), Some(&lr), Some(&mut grads), false);
    d.backward(&f, Some(&gf), Some(&lf), Some(&mut grads), false);
    let mut probe = d.clone();
    let store = d.params_mut();
    compare("discriminator adversarial + identity", store, &grads, seed + 10, |s| {
        *probe.params_mut() = s.clone();
        loss(&probe)
    })
}

/// Generator objective through a fixed discriminator; `with_id` selects
/// the full objective or the lambda2 = 0 ablation.
fn generator_check(seed: u64, name: &'static str, with_id: bool, adv: bool) -> GradCheck {
    let Fixture { mut g, d, x, y } = fixture(seed);
    let w = LossWeights {
        lambda1: 100.0,
        lambda2: if with_id { 100.0 } else { 0.0 },
    };
    let loss = |g: &Generator| {
        let out = g.trace(&x, None).unwrap();
        let l1 = l1_loss(&y, out.output()).unwrap();
        if !adv {
            return l1;
        }
        let f = d.trace(&x, out.output()).unwrap();
        let g_adv = generator_adv_loss(f.realness()).unwrap();
        let g_id = softmax_cross_entropy(logits(f.id_logits()), LABEL).unwrap();
        if with_id {
            tvgan_generator_total(g_adv, l1, g_id, &w).unwrap()
        } else {
            pix2pix_generator_total(g_adv, l1, w.lambda1).unwrap()
        }
    };
    let trace = g.trace(&x, None).unwrap();
    let (_, dl1) = l1_loss_grad(&y, trace.output()).unwrap();
    let dy = if adv {
        let f = d.trace(&x, trace.output()).unwrap();
        let (_, ga) = generator_adv_loss_grad(f.realness(), GeneratorAdvForm::NonSaturating).unwrap();
        let dl = with_id.then(|| softmax_cross_entropy_grad(logits(f.id_logits()), LABEL).unwrap().1 * w.lambda2);
        let (_, mut dy) = d.backward(&f, Some(&ga), dl.as_ref(), None, true).unwrap();
        dy.scaled_add(w.lambda1, &dl1);
        dy
    } else {
        dl1
    };
    let mut grads = Grads::zeros_like(g.params());
    g.backward(&trace, &dy, Some(&mut grads), false);
    let mut probe = g.clone();
    compare(name, g.params_mut(), &grads, seed + 20, |s| {
        *probe.params_mut() = s.clone();
        loss(&probe)
    })
}

/// Identity cross-entropy of the generated pair alone, back to the generator.
fn generator_identity_check(seed: u64) -> GradCheck {
    let Fixture { mut g, d, x, .. } = fixture(seed);
    let loss = |g: &Generator| {
        let out = g.trace(&x, None).unwrap();
        let f = d.trace(&x, out.output()).unwrap();
        softmax_cross_entropy(logits(f.id_logits()), LABEL).unwrap()
    };
    let trace = g.trace(&x, None).unwrap();
    let f = d.trace(&x, trace.output()).unwrap();
    let dl = softmax_cross_entropy_grad(logits(f.id_logits()), LABEL).unwrap().1;
    let (_, dy) = d.backward(&f, None, Some(&dl), None, true).unwrap();
    let mut grads = Grads::zeros_like(g.params());
    g.backward(&trace, &dy, Some(&mut grads), false);
    let mut probe = g.clone();
    compare("generator identity cross-entropy", g.params_mut(), &grads, seed + 30, |s| {
        *probe.params_mut() = s.clone();
        loss(&probe)
    })
}

/// Patch MSE through the residual patch network.
fn patch_check(seed: u64) -> GradCheck {
    let spec = PatchNetSpec {
        patch_size: 9,
        layers: 4,
        features: 4,
        channels: 3,
    };
    let mut net = build_patch_transformer(&spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
    redraw(net.params_mut(), &mut rng);
    let x = image(&mut rng, 3, 9);
    let y = image(&mut rng, 3, 9);
    let loss = |n: &PatchTransformer| mse_loss(&y, &n.forward(&x).unwrap()).unwrap();
    let trace = net.trace(&x).unwrap();
    let (_, dy) = mse_loss_grad(&y, trace.output()).unwrap();
    let mut grads = Grads::zeros_like(net.params());
    net.backward(&trace, &dy, Some(&mut grads), false);
    let mut probe = net.clone();
    compare("patch network MSE", net.params_mut(), &grads, seed + 40, |s| {
        *probe.params_mut() = s.clone();
        loss(&probe)
    })
}

pub fn run_all(seed: u64) -> Vec<GradCheck> {
    vec![
        discriminator_check(seed),
        generator_check(seed, "generator L1", false, false),
        generator_identity_check(seed),
        generator_check(seed, "generator total (adversarial + L1 + identity)", true, true),
        generator_check(seed, "generator total without identity", false, true),
        patch_check(seed),
    ]
}
