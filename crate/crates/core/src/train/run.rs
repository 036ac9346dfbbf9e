use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gan::GanTrainer;
use super::patches::{patch_pairs, PatchTrainer};
use super::{derive_seed, streams, ModelKind, TrainConfig, TransformModel};
use crate::dataio::{augment, DatasetSplit, IdentityEncoding, PairedSample};
use crate::error::{Error, Result};
use crate::losses::{LossRecord, LossReport};
use crate::nets::{save_checkpoint, Discriminator, NetworkHandle};

pub const LOSS_LOG_FILE: &str = "loss_log.jsonl";

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: TransformModel,
    /// Final discriminator of GAN runs.
    pub discriminator: Option<Discriminator>,
    /// One record per optimizer step.
    pub history: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainOutcome {
    /// Mean of `total_g` over the records of one epoch.
    pub fn epoch_mean_total_g(&self, epoch: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .history
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.losses.total_g)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn check_leakage(train: &[&PairedSample], split: &DatasetSplit, epoch: usize) -> Result<()> {
    match train.iter().find(|s| split.test_subjects.contains(&s.subject_id)) {
        Some(s) => Err(Error::Leakage(format!(
            "epoch {epoch}: training sample of subject `{}` belongs to the test split",
            s.subject_id
        ))),
        None => Ok(()),
    }
}

struct Outputs {
    dir: Option<PathBuf>,
    log: Option<BufWriter<File>>,
    kind: ModelKind,
    checkpoints: Vec<PathBuf>,
    history: Vec<LossRecord>,
}

impl Outputs {
    fn new(dir: Option<&Path>, kind: ModelKind) -> Result<Self> {
        let log = match dir {
            Some(d) => {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                let path = d.join(LOSS_LOG_FILE);
                Some(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?))
            }
            None => None,
        };
        Ok(Outputs {
            dir: dir.map(Path::to_path_buf),
            log,
            kind,
            checkpoints: Vec::new(),
            history: Vec::new(),
        })
    }

    fn record(&mut self, step: u64, epoch: usize, losses: LossReport) -> Result<()> {
        let rec = LossRecord { step, epoch, losses };
        if let (Some(log), Some(dir)) = (self.log.as_mut(), self.dir.as_ref()) {
            let line = serde_json::to_string(&rec)?;
            writeln!(log, "{line}").map_err(|e| Error::io(dir.join(LOSS_LOG_FILE), e))?;
        }
        self.history.push(rec);
        Ok(())
    }

    fn checkpoint(&mut self, epoch: usize, nets: &[(&str, NetworkHandle)]) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        for (suffix, net) in nets {
            let path = dir.join(format!("{}_epoch{epoch}{suffix}.ckpt", self.kind));
            save_checkpoint(net, &path)?;
            self.checkpoints.push(path);
        }
        if let Some(log) = self.log.as_mut() {
            log.flush().map_err(|e| Error::io(dir.join(LOSS_LOG_FILE), e))?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<(Vec<LossRecord>, Vec<PathBuf>)> {
        if let (Some(log), Some(dir)) = (self.log.as_mut(), self.dir.as_ref()) {
            log.flush().map_err(|e| Error::io(dir.join(LOSS_LOG_FILE), e))?;
        }
        Ok((self.history, self.checkpoints))
    }
}

fn wants_checkpoint(cfg: &TrainConfig, epoch: usize) -> bool {
    epoch == cfg.epochs || (cfg.checkpoint_every > 0 && epoch.is_multiple_of(cfg.checkpoint_every))
}

/// Trains `kind` on the training subjects of `split`.
///
/// With `out_dir`, writes the loss log and `{kind}_epoch{k}.ckpt`
/// checkpoints there (GAN runs also write `{kind}_epoch{k}_disc.ckpt`).
pub fn train(
    kind: ModelKind,
    dataset: &[PairedSample],
    split: &DatasetSplit,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if kind == ModelKind::Plain {
        return Err(Error::invalid("the plain model is an identity mapping; nothing to train"));
    }
    if cfg.model_kind != kind {
        return Err(Error::invalid(format!(
            "config is for {} but {kind} was requested",
            cfg.model_kind
        )));
    }
    cfg.validate()?;
    let train_set = split.train_samples(dataset);
    if train_set.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let res = cfg.arch.resolution;
    if let Some(s) = train_set.iter().find(|s| s.thermal.height() != res || s.thermal.width() != res) {
        return Err(Error::shape(format!(
            "sample of `{}` is {}x{}, configured resolution is {res}",
            s.subject_id,
            s.thermal.height(),
            s.thermal.width()
        )));
    }
    let mut out = Outputs::new(out_dir, kind)?;
    match kind {
        ModelKind::Tvgan | ModelKind::Pix2pix => {
            let enc = IdentityEncoding::from_subjects(split.train_subjects.iter().cloned())?;
            let mut trainer = GanTrainer::new(cfg, enc)?;
            let mut step = 0u64;
            for epoch in 1..=cfg.epochs {
                check_leakage(&train_set, split, epoch)?;
                let mut order: Vec<usize> = (0..train_set.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::SHUFFLE, epoch as u64)));
                for chunk in order.chunks(cfg.batch_size) {
                    step += 1;
                    let batch: Vec<PairedSample> = chunk
                        .iter()
                        .enumerate()
                        .map(|(b, &i)| {
                            let seed = derive_seed(cfg.seed, streams::AUGMENT, step * 1024 + b as u64);
                            augment(train_set[i], &cfg.augmentation, seed)
                        })
                        .collect();
                    let report = trainer.train_step(&batch, derive_seed(cfg.seed, streams::DROPOUT, step))?;
                    out.record(step, epoch, report)?;
                }
                log::info!(
                    "{kind} epoch {epoch}/{}: mean total_g {:.4}",
                    cfg.epochs,
                    epoch_mean(&out.history, epoch)
                );
                if wants_checkpoint(cfg, epoch) {
                    let (g, d) = (trainer.generator().clone(), trainer.discriminator().clone());
                    out.checkpoint(epoch, &[("", g.into()), ("_disc", d.into())])?;
                }
            }
            let (history, checkpoints) = out.finish()?;
            let (generator, discriminator) = trainer.into_networks();
            Ok(TrainOutcome {
                model: TransformModel::Gan { kind, generator },
                discriminator: Some(discriminator),
                history,
                checkpoints,
            })
        }
        ModelKind::Patch => {
            let mut trainer = PatchTrainer::new(cfg)?;
            let p = cfg.arch.patch.patch_size;
            let mut step = 0u64;
            for epoch in 1..=cfg.epochs {
                check_leakage(&train_set, split, epoch)?;
                let mut pairs = Vec::new();
                for (i, s) in train_set.iter().enumerate() {
                    let seed = derive_seed(cfg.seed, streams::AUGMENT, ((epoch as u64) << 32) + i as u64);
                    pairs.extend(patch_pairs(&augment(s, &cfg.augmentation, seed), p, cfg.patch_stride)?);
                }
                pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::SHUFFLE, epoch as u64)));
                for batch in pairs.chunks(cfg.batch_size) {
                    step += 1;
                    let mse = trainer.train_step(batch)?;
                    let report = LossReport {
                        total_g: mse,
                        ..LossReport::default()
                    };
                    out.record(step, epoch, report)?;
                }
                log::info!("patch epoch {epoch}/{}: mean mse {:.5}", cfg.epochs, epoch_mean(&out.history, epoch));
                if wants_checkpoint(cfg, epoch) {
                    out.checkpoint(epoch, &[("", trainer.net().clone().into())])?;
                }
            }
            let (history, checkpoints) = out.finish()?;
            Ok(TrainOutcome {
                model: TransformModel::Patch(trainer.into_net()),
                discriminator: None,
                history,
                checkpoints,
            })
        }
        ModelKind::Plain => unreachable!("rejected above"),
    }
}

fn epoch_mean(history: &[LossRecord], epoch: usize) -> f64 {
    let v: Vec<f64> = history
        .iter()
        .rev()
        .take_while(|r| r.epoch == epoch)
        .map(|r| r.losses.total_g)
        .collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}
