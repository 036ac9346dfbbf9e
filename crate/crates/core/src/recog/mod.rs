//! Closed-set identification: embedding, cosine nearest-neighbour ranking,
//! rank-k accuracy and CMC curves.

mod embed;
mod eval;

pub use embed::{
    content_hash, toy_embedder, write_embedding_table, Embedder, ExternalEmbedder, ToyEmbedder, TOY_EMBEDDING_DIM,
};
pub use eval::{evaluate, EvalConfig, Metrics, QuerySet, DEFAULT_RANKS};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataio::{GalleryImage, GallerySpec};
use crate::error::{Error, Result};

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine distance of a zero vector"));
    }
    Ok((1.0 - dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry {
    pub subject_id: String,
    pub embedding: Vec<f64>,
}

/// Embedded enrollment set.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    entries: Vec<GalleryEntry>,
    spec: Option<GallerySpec>,
    dim: usize,
}

impl Gallery {
    /// Gallery from raw entries; checks non-emptiness and a shared dimension.
    pub fn new(entries: Vec<GalleryEntry>) -> Result<Self> {
        let dim = entries
            .first()
            .map(|e| e.embedding.len())
            .ok_or_else(|| Error::invalid("gallery is empty"))?;
        if let Some(e) = entries.iter().find(|e| e.embedding.len() != dim) {
            return Err(Error::Dimension {
                expected: dim,
                got: e.embedding.len(),
            });
        }
        Ok(Gallery {
            entries,
            spec: None,
            dim,
        })
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn spec(&self) -> Option<&GallerySpec> {
        self.spec.as_ref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.subject_id.as_str()).collect()
    }
}

/// Embeds every gallery image (no augmentation).
pub fn build_gallery(embedder: &dyn Embedder, images: &[GalleryImage], spec: &GallerySpec) -> Result<Gallery> {
    spec.validate()?;
    let mut per_subject: BTreeMap<&str, usize> = BTreeMap::new();
    for img in images {
        *per_subject.entry(&img.subject_id).or_default() += 1;
    }
    if let Some((s, n)) = per_subject.iter().find(|(_, &n)| n != spec.images_per_subject) {
        return Err(Error::invalid(format!(
            "subject {s} has {n} gallery images, the protocol needs {}",
            spec.images_per_subject
        )));
    }
    let entries = images
        .iter()
        .map(|img| {
            let embedding = embedder.embed(&img.image)?;
            if embedding.len() != embedder.dim() {
                return Err(Error::Dimension {
                    expected: embedder.dim(),
                    got: embedding.len(),
                });
            }
            Ok(GalleryEntry {
                subject_id: img.subject_id.clone(),
                embedding,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut g = Gallery::new(entries)?;
    g.spec = Some(*spec);
    Ok(g)
}

/// How gallery images are turned into a ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankMode {
    /// Rank over gallery images; success at the first correct-subject image.
    #[default]
    PerImage,
    /// Rank over subjects, each scored by its closest gallery image.
    SubjectMin,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankResult {
    pub query_subject: String,
    /// Gallery subjects by ascending distance; ties keep gallery order.
    pub sorted_gallery_subjects: Vec<String>,
    /// 1-based; wrong-subject ties count against the query.
    pub rank: usize,
}

pub fn rank_of_query(query: &[f64], true_subject: &str, gallery: &Gallery) -> Result<RankResult> {
    rank_of_query_with(query, true_subject, gallery, RankMode::PerImage)
}

pub fn rank_of_query_with(query: &[f64], true_subject: &str, gallery: &Gallery, mode: RankMode) -> Result<RankResult> {
    if query.len() != gallery.dim {
        return Err(Error::Dimension {
            expected: gallery.dim,
            got: query.len(),
        });
    }
    let mut scored: Vec<(&str, f64)> = Vec::with_capacity(gallery.len());
    for e in &gallery.entries {
        scored.push((&e.subject_id, cosine_distance(query, &e.embedding)?));
    }
    if mode == RankMode::SubjectMin {
        let mut best: Vec<(&str, f64)> = Vec::new();
        for (s, d) in scored {
            match best.iter_mut().find(|(b, _)| *b == s) {
                Some(slot) => slot.1 = slot.1.min(d),
                None => best.push((s, d)),
            }
        }
        scored = best;
    }
    let target = scored
        .iter()
        .filter(|(s, _)| *s == true_subject)
        .map(|&(_, d)| d)
        .min_by(f64::total_cmp)
        .ok_or_else(|| Error::invalid(format!("query subject {true_subject} is not in the gallery")))?;
    let rank = 1 + scored.iter().filter(|(s, d)| *s != true_subject && *d <= target).count();
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].1.total_cmp(&scored[b].1).then(a.cmp(&b)));
    Ok(RankResult {
        query_subject: true_subject.to_string(),
        sorted_gallery_subjects: order.into_iter().map(|i| scored[i].0.to_string()).collect(),
        rank,
    })
}

/// Number of rank positions: gallery images, or subjects in subject-min mode.
pub(crate) fn rank_positions(gallery: &Gallery, mode: RankMode) -> usize {
    match mode {
        RankMode::PerImage => gallery.len(),
        RankMode::SubjectMin => gallery.subjects().len(),
    }
}

pub fn query_ranks(queries: &[(Vec<f64>, String)], gallery: &Gallery, mode: RankMode) -> Result<Vec<usize>> {
    if queries.is_empty() {
        return Err(Error::invalid("empty query set"));
    }
    queries
        .iter()
        .map(|(q, s)| Ok(rank_of_query_with(q, s, gallery, mode)?.rank))
        .collect()
}

/// Fraction of ranks at most `k`, for each `k`.
pub fn accuracy_from_ranks(ranks: &[usize], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if ranks.is_empty() {
        return Err(Error::invalid("empty query set"));
    }
    if ks.is_empty() || ks.contains(&0) || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("ranks must be positive and strictly ascending"));
    }
    Ok(ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64))
        .collect())
}

/// Rank-k accuracy for `k = 1..=positions`.
pub fn cmc_from_ranks(ranks: &[usize], positions: usize) -> Result<Vec<f64>> {
    if ranks.is_empty() {
        return Err(Error::invalid("empty query set"));
    }
    let mut counts = vec![0usize; positions];
    for &r in ranks {
        if r == 0 || r > positions {
            return Err(Error::invalid(format!("rank {r} outside 1..={positions}")));
        }
        counts[r - 1] += 1;
    }
    let n = ranks.len() as f64;
    let mut acc = 0;
    Ok(counts
        .into_iter()
        .map(|c| {
            acc += c;
            acc as f64 / n
        })
        .collect())
}

pub fn rank_k_accuracy(
    queries: &[(Vec<f64>, String)],
    gallery: &Gallery,
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    accuracy_from_ranks(&query_ranks(queries, gallery, RankMode::PerImage)?, ks)
}

pub fn cmc_curve(queries: &[(Vec<f64>, String)], gallery: &Gallery) -> Result<Vec<f64>> {
    cmc_from_ranks(&query_ranks(queries, gallery, RankMode::PerImage)?, gallery.len())
}
