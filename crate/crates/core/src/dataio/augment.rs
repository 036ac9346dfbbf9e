use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sample::PairedSample;
use super::tensor::ImageTensor;
use crate::error::{Error, Result};

pub const MAX_ROTATION_DEG: f64 = 10.0;
pub const MIN_CROP_FRACTION: f64 = 0.875;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentOp {
    Hflip,
    Rotate,
    Crop,
}

impl fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugmentOp::Hflip => "hflip",
            AugmentOp::Rotate => "rotate",
            AugmentOp::Crop => "crop",
        })
    }
}

impl FromStr for AugmentOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hflip" => Ok(AugmentOp::Hflip),
            "rotate" => Ok(AugmentOp::Rotate),
            "crop" => Ok(AugmentOp::Crop),
            other => Err(Error::invalid(format!("unknown augmentation `{other}`"))),
        }
    }
}

/// Concrete geometric parameters of one augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub angle_deg: f64,
    /// Side fraction of the crop window, in `[MIN_CROP_FRACTION, 1]`.
    pub crop_fraction: f64,
    /// Crop window offset as a fraction of the free margin, in `[0, 1]`.
    pub crop_offset: (f64, f64),
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        angle_deg: 0.0,
        crop_fraction: 1.0,
        crop_offset: (0.0, 0.0),
    };

    pub fn draw(ops: &BTreeSet<AugmentOp>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = AugmentParams::IDENTITY;
        // Always consume the same number of draws so ops do not shift each other.
        let flip = rng.random_bool(0.5);
        let angle = rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
        let frac = rng.random_range(MIN_CROP_FRACTION..=1.0);
        let off = (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
        if ops.contains(&AugmentOp::Hflip) {
            p.flip = flip;
        }
        if ops.contains(&AugmentOp::Rotate) {
            p.angle_deg = angle;
        }
        if ops.contains(&AugmentOp::Crop) {
            p.crop_fraction = frac;
            p.crop_offset = off;
        }
        p
    }

    fn clamped(self) -> Self {
        AugmentParams {
            flip: self.flip,
            angle_deg: self.angle_deg.clamp(-MAX_ROTATION_DEG, MAX_ROTATION_DEG),
            crop_fraction: self.crop_fraction.clamp(MIN_CROP_FRACTION, 1.0),
            crop_offset: (self.crop_offset.0.clamp(0.0, 1.0), self.crop_offset.1.clamp(0.0, 1.0)),
        }
    }

    fn is_pure_flip(&self) -> bool {
        self.angle_deg == 0.0 && self.crop_fraction == 1.0
    }
}

/// Applies one seeded draw of `ops` to both images of the pair.
pub fn augment(sample: &PairedSample, ops: &BTreeSet<AugmentOp>, seed: u64) -> PairedSample {
    if ops.is_empty() {
        return sample.clone();
    }
    apply_params(sample, AugmentParams::draw(ops, seed))
}

pub fn apply_params(sample: &PairedSample, params: AugmentParams) -> PairedSample {
    let params = params.clamped();
    let mut out = sample.clone();
    out.thermal = warp(&sample.thermal, &params);
    out.visible = warp(&sample.visible, &params);
    out
}

/// Resamples `img` so output pixel `p` reads the source location obtained by
/// undoing crop-resize, rotation about the centre and horizontal flip.
fn warp(img: &ImageTensor, p: &AugmentParams) -> ImageTensor {
    let src = img.data();
    let (c, h, w) = src.dim();
    if p.is_pure_flip() {
        if !p.flip {
            return img.clone();
        }
        let out = Array3::from_shape_fn((c, h, w), |(ch, y, x)| src[[ch, y, w - 1 - x]]);
        return ImageTensor::new(out).expect("permutation keeps range");
    }
    let (wf, hf) = (w as f64, h as f64);
    let (cx, cy) = (wf / 2.0, hf / 2.0);
    let (sin, cos) = p.angle_deg.to_radians().sin_cos();
    let ox = (1.0 - p.crop_fraction) * wf * p.crop_offset.0;
    let oy = (1.0 - p.crop_fraction) * hf * p.crop_offset.1;
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            // crop window -> rotated frame
            let u = ox + (x as f64 + 0.5) * p.crop_fraction;
            let v = oy + (y as f64 + 0.5) * p.crop_fraction;
            // inverse rotation about the centre
            let (dx, dy) = (u - cx, v - cy);
            let mut sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            if p.flip {
                sx = wf - sx;
            }
            for ch in 0..c {
                out[[ch, y, x]] = bilinear(src, ch, sx - 0.5, sy - 0.5);
            }
        }
    }
    ImageTensor::from_clamped(out).expect("bilinear blend keeps range")
}

fn bilinear(src: &Array3<f64>, ch: usize, x: f64, y: f64) -> f64 {
    let (_, h, w) = src.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = src[[ch, y0, x0]] * (1.0 - fx) + src[[ch, y0, x1]] * fx;
    let bottom = src[[ch, y1, x0]] * (1.0 - fx) + src[[ch, y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

#[cfg(test)]
mod tests {
    use super::*;

    fn marker_sample(size: usize, at: (usize, usize)) -> PairedSample {
        let mut t = Array3::from_elem((1, size, size), -1.0);
        let mut v = Array3::from_elem((3, size, size), -1.0);
        for dy in 0..3 {
            for dx in 0..3 {
                t[[0, at.1 + dy, at.0 + dx]] = 1.0;
                for c in 0..3 {
                    v[[c, at.1 + dy, at.0 + dx]] = 1.0;
                }
            }
        }
        PairedSample::new(
            ImageTensor::new(t).unwrap(),
            ImageTensor::new(v).unwrap(),
            "m",
            "frontal",
        )
        .unwrap()
    }

    fn argmax(img: &ImageTensor, ch: usize) -> (usize, usize) {
        let d = img.data();
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for y in 0..img.height() {
            for x in 0..img.width() {
                if d[[ch, y, x]] > best_v {
                    best_v = d[[ch, y, x]];
                    best = (x, y);
                }
            }
        }
        best
    }

    #[test]
    fn empty_ops_is_identity() {
        let s = marker_sample(32, (5, 7));
        assert_eq!(augment(&s, &BTreeSet::new(), 3), s);
    }

    #[test]
    fn double_flip_restores_the_original() {
        let s = marker_sample(32, (5, 7));
        let flip = AugmentParams {
            flip: true,
            ..AugmentParams::IDENTITY
        };
        let once = apply_params(&s, flip);
        assert_ne!(once, s);
        assert_eq!(apply_params(&once, flip), s);
    }

    #[test]
    fn crop_keeps_the_resolution() {
        let s = marker_sample(256, (100, 100));
        let ops: BTreeSet<_> = [AugmentOp::Crop].into_iter().collect();
        let out = augment(&s, &ops, 11);
        assert_eq!((out.visible.height(), out.visible.width()), (256, 256));
        assert_eq!((out.thermal.height(), out.thermal.width()), (256, 256));
    }

    #[test]
    fn marker_moves_identically_in_both_modalities() {
        let ops: BTreeSet<_> = [AugmentOp::Hflip, AugmentOp::Rotate, AugmentOp::Crop]
            .into_iter()
            .collect();
        for seed in 0..20 {
            let s = marker_sample(48, (10 + seed as usize, 20));
            let out = augment(&s, &ops, seed);
            assert_eq!(argmax(&out.thermal, 0), argmax(&out.visible, 0), "seed {seed}");
            assert_eq!(out.thermal.data().index_axis(ndarray::Axis(0), 0), out.visible.data().index_axis(ndarray::Axis(0), 2));
        }
    }

    #[test]
    fn draws_respect_parameter_ranges() {
        let ops: BTreeSet<_> = [AugmentOp::Rotate, AugmentOp::Crop].into_iter().collect();
        for seed in 0..200 {
            let p = AugmentParams::draw(&ops, seed);
            assert!(p.angle_deg.abs() <= MAX_ROTATION_DEG);
            assert!((MIN_CROP_FRACTION..=1.0).contains(&p.crop_fraction));
            assert!(!p.flip);
        }
    }

    #[test]
    fn augmentation_is_deterministic() {
        let ops: BTreeSet<_> = [AugmentOp::Hflip, AugmentOp::Rotate, AugmentOp::Crop]
            .into_iter()
            .collect();
        let s = marker_sample(32, (3, 4));
        assert_eq!(augment(&s, &ops, 5), augment(&s, &ops, 5));
    }
}
