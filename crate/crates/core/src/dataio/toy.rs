//! Procedural paired dataset for desk-scale runs.
//!
//! Every subject owns a glyph (shape, hue, position on the face). Visible
//! images draw a skin-toned face ellipse with the coloured glyph on a
//! grey-blue background. Thermal images collapse the same geometry to one
//! channel with hue-dependent weights, blur it and apply a gamma remap, so
//! the glyph hue is recoverable from thermal intensity while the raw thermal
//! image carries no colour.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sample::{PairedSample, FRONTAL_POSE};
use super::tensor::ImageTensor;
use crate::error::{Error, Result};

const POSES: &[(&str, f64, f64)] = &[
    (FRONTAL_POSE, 0.0, 0.0),
    ("left15", -1.0, 0.0),
    ("right15", 1.0, 0.0),
    ("up15", 0.0, -1.0),
    ("down15", 0.0, 1.0),
    ("left30", -2.0, 0.0),
    ("right30", 2.0, 0.0),
];

const BACKGROUND: [f64; 3] = [0.35, 0.37, 0.42];
const SKIN: [f64; 3] = [0.86, 0.66, 0.52];
const THERMAL_WEIGHTS: [f64; 3] = [0.6, 0.3, 0.1];

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disk,
    Square,
    Diamond,
}

#[derive(Debug, Clone, Copy)]
struct Glyph {
    shape: Shape,
    color: [f64; 3],
    /// Centre relative to the face centre, in units of the resolution.
    offset: (f64, f64),
}

pub fn synthesize_toy_dataset(
    n_subjects: usize,
    n_per_subject: usize,
    resolution: usize,
    seed: u64,
) -> Result<Vec<PairedSample>> {
    if n_subjects < 2 {
        return Err(Error::invalid("toy dataset needs at least two subjects"));
    }
    if n_per_subject == 0 {
        return Err(Error::invalid("toy dataset needs at least one sample per subject"));
    }
    if resolution < 64 || !resolution.is_power_of_two() {
        return Err(Error::invalid(format!(
            "toy resolution must be a power of two >= 64, got {resolution}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let glyphs = subject_glyphs(n_subjects, &mut rng);
    let mut out = Vec::with_capacity(n_subjects * n_per_subject);
    for (s, glyph) in glyphs.iter().enumerate() {
        let subject = format!("toy{s:02}");
        for k in 0..n_per_subject {
            let (pose, px, py) = match POSES.get(k) {
                Some(&(name, px, py)) => (name.to_string(), px, py),
                None => (format!("pose{k}"), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)),
            };
            let scale = resolution as f64 / 64.0;
            let jitter = if k == 0 { 0.0 } else { 0.75 };
            let shift = (
                (px * 1.5 + rng.random_range(-jitter..=jitter)) * scale,
                (py * 1.5 + rng.random_range(-jitter..=jitter)) * scale,
            );
            let gain = if k == 0 { 1.0 } else { rng.random_range(0.95..=1.05) };
            let noise_seed = rng.random::<u64>();
            let visible = render_visible(resolution, glyph, shift, gain, noise_seed);
            let thermal = render_thermal(&visible);
            let mut sample = PairedSample::new(
                ImageTensor::from_clamped(thermal)?,
                ImageTensor::from_clamped(visible)?,
                subject.clone(),
                pose,
            )?;
            sample.thermal_path = format!("{subject}_{k:02}_thermal.png");
            sample.visible_path = format!("{subject}_{k:02}_visible.png");
            out.push(sample);
        }
    }
    Ok(out)
}

fn subject_glyphs(n: usize, rng: &mut ChaCha8Rng) -> Vec<Glyph> {
    // 3x3 grid of glyph anchors over the face, shuffled per seed.
    let mut anchors: Vec<(f64, f64)> = (0..9)
        .map(|i| (((i % 3) as f64 - 1.0) * 0.17, ((i / 3) as f64 - 1.0) * 0.19))
        .collect();
    anchors.shuffle(rng);
    let hue_offset = rng.random_range(0.0..1.0);
    (0..n)
        .map(|s| {
            let hue = (hue_offset + s as f64 / n as f64).fract();
            let shape = match s % 3 {
                0 => Shape::Disk,
                1 => Shape::Square,
                _ => Shape::Diamond,
            };
            Glyph {
                shape,
                color: hsv_to_rgb(hue, 0.9, 0.9),
                offset: anchors[s % anchors.len()],
            }
        })
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Visible image in `[-1, 1]`.
fn render_visible(res: usize, glyph: &Glyph, shift: (f64, f64), gain: f64, noise_seed: u64) -> Array3<f64> {
    let r = res as f64;
    let (fcx, fcy) = (r / 2.0 + shift.0, r / 2.0 + shift.1);
    let (ax, ay) = (0.34 * r, 0.42 * r);
    let gcx = fcx + glyph.offset.0 * r;
    let gcy = fcy + glyph.offset.1 * r;
    let gr = r / 9.0;
    let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut img = Array3::zeros((3, res, res));
    for y in 0..res {
        for x in 0..res {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let ex = (px - fcx) / ax;
            let ey = (py - fcy) / ay;
            let mut color = if ex * ex + ey * ey <= 1.0 { SKIN } else { BACKGROUND };
            let (dx, dy) = (px - gcx, py - gcy);
            let inside = match glyph.shape {
                Shape::Disk => dx * dx + dy * dy <= gr * gr,
                Shape::Square => dx.abs() <= gr * 0.9 && dy.abs() <= gr * 0.9,
                Shape::Diamond => dx.abs() + dy.abs() <= gr * 1.25,
            };
            if inside {
                color = glyph.color;
            }
            for c in 0..3 {
                let v = (color[c] * gain + noise.random_range(-0.01..=0.01)).clamp(0.0, 1.0);
                img[[c, y, x]] = v * 2.0 - 1.0;
            }
        }
    }
    img
}

/// Thermal rendition of a visible image: channel collapse, 3x3 binomial blur,
/// gamma remap. Output is single-channel in `[-1, 1]`.
fn render_thermal(visible: &Array3<f64>) -> Array3<f64> {
    let (_, h, w) = visible.dim();
    let collapsed = Array3::from_shape_fn((1, h, w), |(_, y, x)| {
        (0..3)
            .map(|c| THERMAL_WEIGHTS[c] * (visible[[c, y, x]] + 1.0) / 2.0)
            .sum::<f64>()
    });
    const K: [f64; 3] = [0.25, 0.5, 0.25];
    let mut blurred = Array3::zeros((1, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, ky) in K.iter().enumerate() {
                for (j, kx) in K.iter().enumerate() {
                    let yy = (y + i).saturating_sub(1).min(h - 1);
                    let xx = (x + j).saturating_sub(1).min(w - 1);
                    acc += ky * kx * collapsed[[0, yy, xx]];
                }
            }
            blurred[[0, y, x]] = acc.clamp(0.0, 1.0).powf(1.6) * 2.0 - 1.0;
        }
    }
    blurred
}
