//! Structural invariants of the generator and discriminator.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tvgan::nets::{build_discriminator, build_generator, DiscOutput, Discriminator, DiscriminatorSpec, GeneratorSpec, ParamId};

pub struct Invariant {
    pub name: &'static str,
    pub holds: bool,
    pub detail: String,
}

fn random_image(rng: &mut ChaCha8Rng, c: usize, side: usize) -> Array3<f64> {
    Array3::from_shape_fn((c, side, side), |_| rng.random_range(-1.0..=1.0))
}

fn output(d: &Discriminator, x: &Array3<f64>, y: &Array3<f64>) -> DiscOutput {
    d.trace(x, y).unwrap().output()
}

fn perturbed(d: &Discriminator, ids: &[ParamId]) -> Discriminator {
    let mut p = d.clone();
    for &id in ids {
        p.params_mut().get_mut(id).mapv_inplace(|v| v + 0.05);
    }
    p
}

/// Trunk perturbations reach both heads; head perturbations stay in their head.
pub fn weight_sharing() -> Invariant {
    let mut spec = DiscriminatorSpec::new(64, 5);
    spec.base_channels = 8;
    let d = build_discriminator(&spec, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (x, y) = (random_image(&mut rng, 3, 64), random_image(&mut rng, 3, 64));
    let base = output(&d, &x, &y);

    let mut failures = Vec::new();
    for id in d.trunk_params() {
        let o = output(&perturbed(&d, &[id]), &x, &y);
        if o.realness == base.realness || o.id_logits == base.id_logits {
            failures.push(format!("trunk {} does not move both heads", d.params().name(id)));
        }
    }
    for id in d.identity_head_params() {
        let o = output(&perturbed(&d, &[id]), &x, &y);
        if o.realness != base.realness || o.id_logits == base.id_logits {
            failures.push(format!("identity head {} leaks into realness", d.params().name(id)));
        }
    }
    for id in d.realness_head_params() {
        let o = output(&perturbed(&d, &[id]), &x, &y);
        if o.id_logits != base.id_logits || o.realness == base.realness {
            failures.push(format!("realness head {} leaks into identity logits", d.params().name(id)));
        }
    }
    Invariant {
        name: "discriminator weight sharing",
        holds: failures.is_empty(),
        detail: if failures.is_empty() {
            format!(
                "{} trunk, {} identity-head, {} realness-head tensors",
                d.trunk_params().len(),
                d.identity_head_params().len(),
                d.realness_head_params().len()
            )
        } else {
            failures.join("; ")
        },
    }
}

/// Generator outputs stay in `[-1, 1]` over random inputs, weights and dropout.
pub fn generator_range(draws: usize) -> Invariant {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    let mut bad = 0;
    for i in 0..draws {
        let mut g = build_generator(&GeneratorSpec::new(16, 2, 4), i as u64 / 50).unwrap();
        // large weights push tanh into saturation
        let gain = rng.random_range(1.0..200.0);
        let ids: Vec<ParamId> = g.params().ids().collect();
        for id in ids {
            g.params_mut().get_mut(id).mapv_inplace(|v| v * gain);
        }
        let scale = rng.random_range(0.1..50.0);
        let x = random_image(&mut rng, 3, 16) * scale;
        let dropout = rng.random_bool(0.5).then_some(i as u64);
        let out = g.trace(&x, dropout).unwrap();
        for &v in out.output() {
            if !(-1.0..=1.0).contains(&v) {
                bad += 1;
            }
            worst = worst.max(v.abs());
        }
    }
    Invariant {
        name: "generator output range",
        holds: bad == 0,
        detail: format!("{draws} draws, max |value| {worst}, {bad} out of range"),
    }
}

/// The default 256-pixel, depth-8 U-Net narrows to a 1x1 bottleneck.
pub fn bottleneck() -> Invariant {
    let default = GeneratorSpec::default();
    let narrow = GeneratorSpec::new(256, 8, 2);
    let g = build_generator(&narrow, 0).unwrap();
    let shapes = g.layer_shapes();
    let enc7 = shapes.iter().find(|(n, _)| n == "enc7").map(|(_, s)| *s);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let out = g.trace(&random_image(&mut rng, 3, 256), None).unwrap();
    let holds = (default.resolution, default.depth, default.bottleneck_size()) == (256, 8, 1)
        && enc7.is_some_and(|(_, h, w)| (h, w) == (1, 1))
        && out.output().dim() == (3, 256, 256);
    Invariant {
        name: "U-Net bottleneck",
        holds,
        detail: format!(
            "default spec bottleneck {}x{0}, built enc7 {:?}, output {:?}",
            default.bottleneck_size(),
            enc7,
            out.output().dim()
        ),
    }
}
