use ndarray::{Array1, Array3};

use super::{derive_seed, streams, Adam, ModelKind, TrainConfig};
use crate::dataio::{IdentityEncoding, PairedSample};
use crate::error::{Error, Result};
use crate::losses::{
    discriminator_adv_loss, discriminator_adv_loss_grad, generator_adv_loss_form, generator_adv_loss_grad, l1_loss,
    l1_loss_grad, pix2pix_generator_total, softmax_cross_entropy, softmax_cross_entropy_grad, tvgan_generator_total,
    LossReport,
};
use crate::nets::{
    build_discriminator, build_generator, Discriminator, DiscriminatorTrace, Generator, GeneratorTrace, Grads,
    ParamStore,
};

/// Generator, discriminator and their optimizers for the GAN models.
#[derive(Debug, Clone)]
pub struct GanTrainer {
    generator: Generator,
    discriminator: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    encoding: IdentityEncoding,
    cfg: TrainConfig,
    steps: u64,
}

struct StepItem {
    x: Array3<f64>,
    y: Array3<f64>,
    label: Option<usize>,
    g_trace: GeneratorTrace,
    d_real: DiscriminatorTrace,
    d_fake: DiscriminatorTrace,
}

impl StepItem {
    fn fake(&self) -> &Array3<f64> {
        self.g_trace.output()
    }
}

/// Forward state of one step, measured before any update.
pub struct StepState {
    items: Vec<StepItem>,
    step: u64,
    pub report: LossReport,
}

fn non_finite(step: u64, term: impl Into<String>) -> Error {
    Error::NonFinite { step, term: term.into() }
}

fn check_params(step: u64, store: &ParamStore, what: &str) -> Result<()> {
    match store.first_non_finite() {
        Some(name) => Err(non_finite(step, format!("{what} parameter {name}"))),
        None => Ok(()),
    }
}

impl GanTrainer {
    pub fn new(cfg: &TrainConfig, encoding: IdentityEncoding) -> Result<Self> {
        cfg.validate()?;
        if !cfg.model_kind.is_gan() {
            return Err(Error::invalid(format!("{} is not a GAN model", cfg.model_kind)));
        }
        let generator = build_generator(&cfg.arch.generator(), derive_seed(cfg.seed, streams::GENERATOR_INIT, 0))?;
        let discriminator = build_discriminator(
            &cfg.arch.discriminator(encoding.num_subjects()),
            derive_seed(cfg.seed, streams::DISCRIMINATOR_INIT, 0),
        )?;
        let opt_g = Adam::new(generator.params(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
        let opt_d = Adam::new(discriminator.params(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
        Ok(GanTrainer {
            generator,
            discriminator,
            opt_g,
            opt_d,
            encoding,
            cfg: cfg.clone(),
            steps: 0,
        })
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn into_networks(self) -> (Generator, Discriminator) {
        (self.generator, self.discriminator)
    }

    pub fn encoding(&self) -> &IdentityEncoding {
        &self.encoding
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Completed steps.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn identity(&self) -> bool {
        self.cfg.model_kind == ModelKind::Tvgan
    }

    /// Runs the forward passes for a batch and measures all losses.
    pub fn prepare(&self, batch: &[PairedSample], step_seed: u64) -> Result<StepState> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let step = self.steps + 1;
        let n = self.encoding.generated_class();
        let mut items = Vec::with_capacity(batch.len());
        let mut sum = LossReport::default();
        for (b, sample) in batch.iter().enumerate() {
            let x = sample.thermal.to_rgb().into_data();
            let y = sample.visible.to_rgb().into_data();
            let label = match self.identity() {
                true => Some(self.encoding.index_of(&sample.subject_id)?),
                false => None,
            };
            let g_trace = self.generator.trace(&x, Some(derive_seed(step_seed, streams::DROPOUT, b as u64)))?;
            let d_real = self.discriminator.trace(&x, &y)?;
            let d_fake = self.discriminator.trace(&x, g_trace.output())?;
            sum.d_adv += discriminator_adv_loss(d_real.realness(), d_fake.realness())?;
            sum.g_adv += generator_adv_loss_form(d_fake.realness(), self.cfg.g_adv_form)?;
            sum.l1 += l1_loss(&y, g_trace.output())?;
            if let Some(k) = label {
                let real_logits = d_real.id_logits().as_slice().expect("contiguous");
                let fake_logits = d_fake.id_logits().as_slice().expect("contiguous");
                sum.d_id += softmax_cross_entropy(real_logits, k)?;
                if self.cfg.id_fake_term {
                    sum.d_id += softmax_cross_entropy(fake_logits, n)?;
                }
                sum.g_id += softmax_cross_entropy(fake_logits, k)?;
            }
            items.push(StepItem {
                x,
                y,
                label,
                g_trace,
                d_real,
                d_fake,
            });
        }
        let scale = 1.0 / batch.len() as f64;
        let w = &self.cfg.weights;
        let mut report = LossReport {
            d_adv: sum.d_adv * scale,
            g_adv: sum.g_adv * scale,
            l1: sum.l1 * scale,
            d_id: sum.d_id * scale,
            g_id: sum.g_id * scale,
            ..LossReport::default()
        };
        if self.identity() {
            report.total_g = tvgan_generator_total(report.g_adv, report.l1, report.g_id, w)?;
            report.total_d = report.d_adv + w.lambda2 * report.d_id;
        } else {
            report.total_g = pix2pix_generator_total(report.g_adv, report.l1, w.lambda1)?;
            report.total_d = report.d_adv;
        }
        if let Some(term) = report.first_non_finite() {
            return Err(non_finite(step, term));
        }
        Ok(StepState { items, step, report })
    }

    /// Discriminator update on real pairs and detached fake pairs.
    pub fn update_discriminator(&mut self, state: &StepState) -> Result<()> {
        let d = &self.discriminator;
        let lambda2 = self.cfg.weights.lambda2;
        let n = self.encoding.generated_class();
        let mut grads = Grads::zeros_like(d.params());
        for item in &state.items {
            let (_, g_real, g_fake) = discriminator_adv_loss_grad(item.d_real.realness(), item.d_fake.realness())?;
            let mut dl_real: Option<Array1<f64>> = None;
            let mut dl_fake: Option<Array1<f64>> = None;
            if let Some(k) = item.label {
                let real_logits = item.d_real.id_logits().as_slice().expect("contiguous");
                dl_real = Some(softmax_cross_entropy_grad(real_logits, k)?.1 * lambda2);
                if self.cfg.id_fake_term {
                    let fake_logits = item.d_fake.id_logits().as_slice().expect("contiguous");
                    dl_fake = Some(softmax_cross_entropy_grad(fake_logits, n)?.1 * lambda2);
                }
            }
            d.backward(&item.d_real, Some(&g_real), dl_real.as_ref(), Some(&mut grads), false);
            d.backward(&item.d_fake, Some(&g_fake), dl_fake.as_ref(), Some(&mut grads), false);
        }
        grads.scale(1.0 / state.items.len() as f64);
        if !grads.all_finite() {
            return Err(non_finite(state.step, "discriminator gradient"));
        }
        let mut ids = d.trunk_params();
        ids.extend(d.realness_head_params());
        if self.identity() {
            ids.extend(d.identity_head_params());
        }
        self.opt_d.step(self.discriminator.params_mut(), &grads, &ids);
        check_params(state.step, self.discriminator.params(), "discriminator")
    }

    /// Generator update through the current discriminator.
    pub fn update_generator(&mut self, state: &StepState) -> Result<()> {
        let d = &self.discriminator;
        let g = &self.generator;
        let w = self.cfg.weights;
        let mut grads = Grads::zeros_like(g.params());
        for item in &state.items {
            let d_fake = d.trace(&item.x, item.fake())?;
            let (_, g_adv) = generator_adv_loss_grad(d_fake.realness(), self.cfg.g_adv_form)?;
            let dl = match item.label {
                Some(k) => {
                    let logits = d_fake.id_logits().as_slice().expect("contiguous");
                    Some(softmax_cross_entropy_grad(logits, k)?.1 * w.lambda2)
                }
                None => None,
            };
            let (_, mut dy) = d
                .backward(&d_fake, Some(&g_adv), dl.as_ref(), None, true)
                .expect("input gradient requested");
            let (_, dl1) = l1_loss_grad(&item.y, item.fake())?;
            dy.scaled_add(w.lambda1, &dl1);
            g.backward(&item.g_trace, &dy, Some(&mut grads), false);
        }
        grads.scale(1.0 / state.items.len() as f64);
        if !grads.all_finite() {
            return Err(non_finite(state.step, "generator gradient"));
        }
        let ids: Vec<_> = g.params().ids().collect();
        self.opt_g.step(self.generator.params_mut(), &grads, &ids);
        check_params(state.step, self.generator.params(), "generator")
    }

    /// One alternating update: discriminator first, then generator.
    /// Returns the losses measured before either update.
    pub fn train_step(&mut self, batch: &[PairedSample], step_seed: u64) -> Result<LossReport> {
        let state = self.prepare(batch, step_seed)?;
        self.update_discriminator(&state)?;
        self.update_generator(&state)?;
        self.steps += 1;
        Ok(state.report)
    }
}

/// Single-sample alternating update.
pub fn train_step_gan(trainer: &mut GanTrainer, sample: &PairedSample, step_seed: u64) -> Result<LossReport> {
    trainer.train_step(std::slice::from_ref(sample), step_seed)
}
