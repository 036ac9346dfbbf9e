//! Brute-force ranking oracle and random identification instances.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tvgan::recog::{cosine_distance, Gallery, GalleryEntry, RankMode};

#[derive(Debug, Clone)]
pub struct Instance {
    pub gallery: Vec<(String, Vec<f64>)>,
    pub query: Vec<f64>,
    pub subject: String,
}

impl Instance {
    pub fn gallery(&self) -> Gallery {
        Gallery::new(
            self.gallery
                .iter()
                .map(|(s, e)| GalleryEntry {
                    subject_id: s.clone(),
                    embedding: e.clone(),
                })
                .collect(),
        )
        .unwrap()
    }
}

fn nonzero_vector(rng: &mut ChaCha8Rng, d: usize, integer: bool) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d)
            .map(|_| match integer {
                true => rng.random_range(-2i32..=2) as f64,
                false => rng.random_range(-1.0..1.0),
            })
            .collect();
        if v.iter().any(|&x| x != 0.0) {
            return v;
        }
    }
}

/// Gallery of at most `max_m` entries in at most `max_d` dimensions. Integer
/// coordinates in `[-2, 2]` make exact distance ties common.
pub fn random_instance(rng: &mut ChaCha8Rng, max_m: usize, max_d: usize, integer: bool) -> Instance {
    let m = rng.random_range(1..=max_m);
    let d = rng.random_range(1..=max_d);
    let n_subjects = rng.random_range(1..=m.min(6));
    let gallery: Vec<(String, Vec<f64>)> = (0..m)
        .map(|i| {
            // every subject appears at least once
            let s = if i < n_subjects { i } else { rng.random_range(0..n_subjects) };
            (format!("s{s}"), nonzero_vector(rng, d, integer))
        })
        .collect();
    let subject = format!("s{}", rng.random_range(0..n_subjects));
    Instance {
        gallery,
        query: nonzero_vector(rng, d, integer),
        subject,
    }
}

pub fn instances(seed: u64, n: usize, integer: bool) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_instance(&mut rng, 20, 8, integer)).collect()
}

/// Sorts every candidate by distance, wrong subjects ahead of the true one
/// at equal distance, and returns the 1-based position of the first hit.
pub fn brute_force_rank(inst: &Instance, mode: RankMode) -> usize {
    let mut candidates: Vec<(f64, bool)> = match mode {
        RankMode::PerImage => inst
            .gallery
            .iter()
            .map(|(s, e)| (cosine_distance(&inst.query, e).unwrap(), *s == inst.subject))
            .collect(),
        RankMode::SubjectMin => {
            let mut best: BTreeMap<&str, f64> = BTreeMap::new();
            for (s, e) in &inst.gallery {
                let d = cosine_distance(&inst.query, e).unwrap();
                let slot = best.entry(s).or_insert(f64::INFINITY);
                *slot = slot.min(d);
            }
            best.into_iter().map(|(s, d)| (d, s == inst.subject)).collect()
        }
    };
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    1 + candidates.iter().position(|c| c.1).expect("true subject enrolled")
}

/// Cosine distance from its definition, for cross-checking the library.
pub fn reference_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}
