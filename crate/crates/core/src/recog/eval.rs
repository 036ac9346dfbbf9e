use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{accuracy_from_ranks, build_gallery, cmc_from_ranks, query_ranks, rank_positions, Embedder, RankMode};
use crate::dataio::{build_gallery_samples, DatasetSplit, GallerySpec, PairedSample, Protocol};
use crate::error::{Error, Result};
use crate::train::{derive_seed, transform_with, TransformModel};

pub const DEFAULT_RANKS: [usize; 4] = [1, 3, 5, 7];

/// Which subjects provide the thermal queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuerySet {
    /// Held-out subjects.
    #[default]
    Test,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub ranks: Vec<usize>,
    /// Seed of the protocol-B pose draw.
    pub gallery_seed: u64,
    pub rank_mode: RankMode,
    pub query_set: QuerySet,
    /// Generator dropout stays active for queries when set.
    pub dropout_seed: Option<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            protocol: Protocol::A,
            ranks: DEFAULT_RANKS.to_vec(),
            gallery_seed: 0,
            rank_mode: RankMode::PerImage,
            query_set: QuerySet::Test,
            dropout_seed: None,
        }
    }
}

/// Identification results of one method on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub split: String,
    pub method: String,
    pub protocol: Protocol,
    pub query_set: QuerySet,
    pub rank_mode: RankMode,
    pub num_queries: usize,
    pub gallery_size: usize,
    /// Rank level to accuracy in `[0, 1]`.
    pub accuracies: BTreeMap<usize, f64>,
    pub cmc: Vec<f64>,
}

/// Transforms the thermal queries of one split with `model` and identifies
/// them against a visible gallery of every subject in `dataset`.
///
/// Frames that were enrolled in the gallery are not used as queries.
pub fn evaluate(
    model: &TransformModel,
    embedder: &dyn Embedder,
    dataset: &[PairedSample],
    split: &DatasetSplit,
    split_name: &str,
    cfg: &EvalConfig,
) -> Result<Metrics> {
    let spec = GallerySpec::for_protocol(cfg.protocol);
    let gallery_images = build_gallery_samples(dataset, &spec, cfg.gallery_seed)?;
    let gallery = build_gallery(embedder, &gallery_images, &spec)?;
    let enrolled: BTreeSet<usize> = gallery_images.iter().map(|g| g.sample_index).collect();
    let subjects = match cfg.query_set {
        QuerySet::Test => &split.test_subjects,
        QuerySet::Train => &split.train_subjects,
    };
    let mut queries = Vec::new();
    for (i, s) in dataset.iter().enumerate() {
        if !subjects.contains(&s.subject_id) || enrolled.contains(&i) {
            continue;
        }
        let seed = cfg.dropout_seed.map(|base| derive_seed(base, 0, i as u64));
        let y = transform_with(model, &s.thermal, seed)?;
        queries.push((embedder.embed(&y)?, s.subject_id.clone()));
    }
    if queries.is_empty() {
        return Err(Error::invalid(format!("split {split_name} yields no {:?} queries", cfg.query_set)));
    }
    let ranks = query_ranks(&queries, &gallery, cfg.rank_mode)?;
    Ok(Metrics {
        split: split_name.to_string(),
        method: model.kind().to_string(),
        protocol: cfg.protocol,
        query_set: cfg.query_set,
        rank_mode: cfg.rank_mode,
        num_queries: queries.len(),
        gallery_size: gallery.len(),
        accuracies: accuracy_from_ranks(&ranks, &cfg.ranks)?,
        cmc: cmc_from_ranks(&ranks, rank_positions(&gallery, cfg.rank_mode))?,
    })
}
