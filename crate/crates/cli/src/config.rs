use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tvgan::dataio::Protocol;
use tvgan::recog::{EvalConfig, QuerySet, RankMode, DEFAULT_RANKS};
use tvgan::train::{ModelKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    #[default]
    Random,
    Attribute,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    /// Image side used when loading; defaults to `train.arch.resolution`.
    pub resolution: Option<usize>,
    pub splits: Option<Vec<PathBuf>>,
    pub mode: Option<SplitMode>,
    pub n_test: Option<usize>,
    pub attribute: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub protocol: Option<Protocol>,
    pub ranks: Option<Vec<usize>>,
    /// `toy`, `file:<path>` or `cmd:<command>`.
    pub embedder: Option<String>,
    pub embedding_file: Option<PathBuf>,
    pub embedding_dim: Option<usize>,
    pub gallery_seed: Option<u64>,
    pub rank_mode: Option<RankMode>,
    pub query_set: Option<QuerySet>,
    pub checkpoints: Option<Vec<PathBuf>>,
}

/// Contents of the `--config` TOML file. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub model: Option<ModelKind>,
    #[serde(default)]
    pub data: DataSection,
    /// Overrides of the per-model training defaults.
    #[serde(default)]
    pub train: toml::Table,
    #[serde(default)]
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        // surface unknown train keys now rather than at training time
        cfg.train_config(cfg.model.unwrap_or(ModelKind::Tvgan), None)
            .with_context(|| format!("invalid [train] section in {}", path.display()))?;
        Ok(cfg)
    }

    /// Training defaults for `kind` with the `[train]` overrides applied.
    pub fn train_config(&self, kind: ModelKind, seed: Option<u64>) -> Result<TrainConfig> {
        let mut base = toml::Table::try_from(TrainConfig::for_kind(kind)).context("serializing defaults")?;
        merge(&mut base, &self.train, "train")?;
        base.insert("model_kind".into(), toml::Value::String(kind.to_string()));
        if let Some(seed) = seed.or(self.seed) {
            base.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        let cfg: TrainConfig = toml::Value::Table(base).try_into()?;
        Ok(cfg)
    }

    pub fn eval_config(&self) -> EvalConfig {
        let d = EvalConfig::default();
        EvalConfig {
            protocol: self.eval.protocol.unwrap_or(d.protocol),
            ranks: self.eval.ranks.clone().unwrap_or_else(|| DEFAULT_RANKS.to_vec()),
            gallery_seed: self.eval.gallery_seed.unwrap_or(d.gallery_seed),
            rank_mode: self.eval.rank_mode.unwrap_or(d.rank_mode),
            query_set: self.eval.query_set.unwrap_or(d.query_set),
            dropout_seed: None,
        }
    }
}

/// Recursively overlays `over` onto `base`; keys absent from `base` are errors.
fn merge(base: &mut toml::Table, over: &toml::Table, path: &str) -> Result<()> {
    for (k, v) in over {
        let here = format!("{path}.{k}");
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o, &here)?,
            (Some(slot), v) => *slot = v.clone(),
            (None, _) => bail!("unknown key `{here}`"),
        }
    }
    Ok(())
}
