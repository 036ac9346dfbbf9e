//! Training objectives.
//!
//! All losses are means over elements or patches, so the default weights
//! transfer across resolutions. Every loss has a `*_grad` twin that also
//! returns the gradient w.r.t. its (first) prediction argument.
//!
//! The reconstruction term compares the ground truth with the *generator*
//! output, `mean |Y - G(X)|`. The identity terms are multi-class
//! cross-entropies over N+1 classes: real pairs carry their subject label,
//! generated pairs the reserved last class on the discriminator side and the
//! subject label on the generator side.

use ndarray::{Array, Array1, ArrayBase, Data, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logarithms.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 100.0,
            lambda2: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which generator adversarial objective to minimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorAdvForm {
    /// `-mean(log D(X, G(X)))`.
    #[default]
    NonSaturating,
    /// `mean(log(1 - D(X, G(X))))`, the literal minimax term (non-positive).
    Saturating,
}

/// Per-step loss values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub d_adv: f64,
    pub g_adv: f64,
    pub l1: f64,
    pub d_id: f64,
    pub g_id: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("d_adv", self.d_adv),
            ("g_adv", self.g_adv),
            ("l1", self.l1),
            ("d_id", self.d_id),
            ("g_id", self.g_id),
            ("total_g", self.total_g),
            ("total_d", self.total_d),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// One line of the JSON-lines loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossReport,
}

fn check_scores<S, D>(scores: &ArrayBase<S, D>, what: &str) -> Result<()>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    if scores.is_empty() {
        return Err(Error::invalid(format!("{what}: empty score map")));
    }
    if let Some(v) = scores.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("{what}: score {v} outside [0, 1]")));
    }
    Ok(())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// `d/dp` of `-log(clamp(p))`; zero where the clamp is engaged.
fn neg_log_grad(p: f64) -> f64 {
    if (EPS..=1.0 - EPS).contains(&p) {
        -1.0 / p
    } else {
        0.0
    }
}

/// Discriminator realness loss, `-mean log D(real) - mean log(1 - D(fake))`.
pub fn discriminator_adv_loss<S1, S2, D1, D2>(real: &ArrayBase<S1, D1>, fake: &ArrayBase<S2, D2>) -> Result<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D1: Dimension,
    D2: Dimension,
{
    check_scores(real, "real scores")?;
    check_scores(fake, "fake scores")?;
    let lr = real.iter().map(|&p| -clamp_prob(p).ln()).sum::<f64>() / real.len() as f64;
    let lf = fake.iter().map(|&p| -(1.0 - clamp_prob(p)).ln()).sum::<f64>() / fake.len() as f64;
    Ok(lr + lf)
}

/// Loss and gradients w.r.t. the real and fake score maps.
#[allow(clippy::type_complexity)]
pub fn discriminator_adv_loss_grad<S1, S2, D1, D2>(
    real: &ArrayBase<S1, D1>,
    fake: &ArrayBase<S2, D2>,
) -> Result<(f64, Array<f64, D1>, Array<f64, D2>)>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D1: Dimension,
    D2: Dimension,
{
    let loss = discriminator_adv_loss(real, fake)?;
    let (nr, nf) = (real.len() as f64, fake.len() as f64);
    let gr = real.mapv(|p| neg_log_grad(p) / nr);
    let gf = fake.mapv(|p| -neg_log_grad(1.0 - p) / nf);
    Ok((loss, gr, gf))
}

/// Non-saturating generator loss, `-mean log D(X, G(X))`.
pub fn generator_adv_loss<S, D>(fake: &ArrayBase<S, D>) -> Result<f64>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    generator_adv_loss_form(fake, GeneratorAdvForm::NonSaturating)
}

pub fn generator_adv_loss_form<S, D>(fake: &ArrayBase<S, D>, form: GeneratorAdvForm) -> Result<f64>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    check_scores(fake, "fake scores")?;
    let n = fake.len() as f64;
    Ok(match form {
        GeneratorAdvForm::NonSaturating => fake.iter().map(|&p| -clamp_prob(p).ln()).sum::<f64>() / n,
        GeneratorAdvForm::Saturating => fake.iter().map(|&p| (1.0 - clamp_prob(p)).ln()).sum::<f64>() / n,
    })
}

pub fn generator_adv_loss_grad<S, D>(fake: &ArrayBase<S, D>, form: GeneratorAdvForm) -> Result<(f64, Array<f64, D>)>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    let loss = generator_adv_loss_form(fake, form)?;
    let n = fake.len() as f64;
    let grad = match form {
        GeneratorAdvForm::NonSaturating => fake.mapv(|p| neg_log_grad(p) / n),
        GeneratorAdvForm::Saturating => fake.mapv(|p| neg_log_grad(1.0 - p) / n),
    };
    Ok((loss, grad))
}

fn check_same_shape<S1, S2, D>(a: &ArrayBase<S1, D>, b: &ArrayBase<S2, D>) -> Result<()>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::shape("empty tensors"));
    }
    Ok(())
}

/// Mean absolute difference between ground truth `y` and prediction `y_hat`.
pub fn l1_loss<S1, S2, D>(y: &ArrayBase<S1, D>, y_hat: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    check_same_shape(y, y_hat)?;
    Ok(y.iter().zip(y_hat.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// L1 loss and its gradient w.r.t. `y_hat` (subgradient 0 at ties).
pub fn l1_loss_grad<S1, S2, D>(y: &ArrayBase<S1, D>, y_hat: &ArrayBase<S2, D>) -> Result<(f64, Array<f64, D>)>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    let loss = l1_loss(y, y_hat)?;
    let n = y.len() as f64;
    let mut g = y_hat.to_owned();
    g.zip_mut_with(y, |p, &t| {
        let d = *p - t;
        *p = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        }
    });
    Ok((loss, g))
}

/// Mean squared difference.
pub fn mse_loss<S1, S2, D>(y: &ArrayBase<S1, D>, y_hat: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    check_same_shape(y, y_hat)?;
    Ok(y.iter().zip(y_hat.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

pub fn mse_loss_grad<S1, S2, D>(y: &ArrayBase<S1, D>, y_hat: &ArrayBase<S2, D>) -> Result<(f64, Array<f64, D>)>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    let loss = mse_loss(y, y_hat)?;
    let n = y.len() as f64;
    let mut g = y_hat.to_owned();
    g.zip_mut_with(y, |p, &t| *p = 2.0 * (*p - t) / n);
    Ok((loss, g))
}

/// Numerically stable log-sum-exp.
fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Cross-entropy of `softmax(logits)` against class `target`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::invalid(format!("class {target} out of range for {} logits", logits.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite logit"));
    }
    Ok(log_sum_exp(logits) - logits[target])
}

/// Cross-entropy and its gradient `softmax(logits) - onehot(target)`.
pub fn softmax_cross_entropy_grad(logits: &[f64], target: usize) -> Result<(f64, Array1<f64>)> {
    let loss = softmax_cross_entropy(logits, target)?;
    let lse = log_sum_exp(logits);
    let mut g = Array1::from_iter(logits.iter().map(|v| (v - lse).exp()));
    g[target] -= 1.0;
    Ok((loss, g))
}

/// Index of the hot entry of a valid one-hot label.
pub fn one_hot_index(label: &[f64]) -> Result<usize> {
    let hot: Vec<usize> = label
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, _)| i)
        .collect();
    match hot.as_slice() {
        [i] if label[*i] == 1.0 => Ok(*i),
        _ => Err(Error::invalid("identity label is not one-hot")),
    }
}

/// Validates a real-subject label against logits of length N+1.
fn real_class(logits_len: usize, true_id: &[f64]) -> Result<usize> {
    if true_id.len() != logits_len {
        return Err(Error::invalid(format!(
            "label length {} does not match {} logits",
            true_id.len(),
            logits_len
        )));
    }
    if logits_len < 2 {
        return Err(Error::invalid("identity head needs at least N+1 = 2 classes"));
    }
    let idx = one_hot_index(true_id)?;
    if idx == logits_len - 1 {
        return Err(Error::invalid("real pairs cannot carry the generated-class label"));
    }
    Ok(idx)
}

/// Discriminator identity loss: real pairs against the subject label plus
/// generated pairs against the reserved class.
pub fn identity_loss_discriminator(id_logits_real: &[f64], true_id: &[f64], id_logits_fake: &[f64]) -> Result<f64> {
    let k = real_class(id_logits_real.len(), true_id)?;
    if id_logits_fake.len() != id_logits_real.len() {
        return Err(Error::shape("real and fake logits differ in length"));
    }
    let generated = id_logits_fake.len() - 1;
    Ok(softmax_cross_entropy(id_logits_real, k)? + softmax_cross_entropy(id_logits_fake, generated)?)
}

/// Discriminator identity loss restricted to real pairs (the fake term dropped).
pub fn identity_loss_discriminator_real_only(id_logits_real: &[f64], true_id: &[f64]) -> Result<f64> {
    let k = real_class(id_logits_real.len(), true_id)?;
    softmax_cross_entropy(id_logits_real, k)
}

/// Generator identity loss: generated pairs should be recognised as the
/// true subject.
pub fn identity_loss_generator(id_logits_fake: &[f64], true_id: &[f64]) -> Result<f64> {
    let k = real_class(id_logits_fake.len(), true_id)?;
    softmax_cross_entropy(id_logits_fake, k)
}

/// `g_adv + lambda1 * l1 + lambda2 * g_id`.
pub fn tvgan_generator_total(g_adv: f64, l1: f64, g_id: f64, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    if ![g_adv, l1, g_id].iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("non-finite loss component"));
    }
    Ok(g_adv + w.lambda1 * l1 + w.lambda2 * g_id)
}

/// Pix2Pix generator objective, `g_adv + lambda1 * l1`.
pub fn pix2pix_generator_total(g_adv: f64, l1: f64, lambda1: f64) -> Result<f64> {
    if ![g_adv, l1, lambda1].iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("non-finite loss component"));
    }
    Ok(g_adv + lambda1 * l1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array2};
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn uniform(v: f64) -> Array2<f64> {
        Array2::from_elem((4, 4), v)
    }

    #[test]
    fn d_adv_at_half_is_two_ln2() {
        let l = discriminator_adv_loss(&uniform(0.5), &uniform(0.5)).unwrap();
        assert!((l - 2.0 * LN2).abs() < 1e-12);
        assert!((l - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn d_adv_perfect_discriminator_is_near_zero() {
        let l = discriminator_adv_loss(&uniform(1.0 - EPS), &uniform(EPS)).unwrap();
        assert!(l < 1e-6);
    }

    #[test]
    fn d_adv_real_08_fake_03() {
        // -(ln 0.8 + ln 0.7)
        let l = discriminator_adv_loss(&uniform(0.8), &uniform(0.3)).unwrap();
        assert!((l - 0.579818495252942).abs() < 1e-9);
    }

    #[test]
    fn scores_outside_unit_interval_are_rejected() {
        assert!(discriminator_adv_loss(&uniform(1.2), &uniform(0.5)).is_err());
        assert!(generator_adv_loss(&uniform(-0.1)).is_err());
        assert!(generator_adv_loss(&uniform(f64::NAN)).is_err());
    }

    #[test]
    fn clamping_keeps_extremes_finite() {
        for (r, f) in [(0.0, 1.0), (1.0, 0.0), (0.0, 0.0), (1.0, 1.0)] {
            assert!(discriminator_adv_loss(&uniform(r), &uniform(f)).unwrap().is_finite());
            assert!(generator_adv_loss(&uniform(f)).unwrap().is_finite());
        }
    }

    #[test]
    fn g_adv_examples() {
        assert!((generator_adv_loss(&uniform(0.5)).unwrap() - LN2).abs() < 1e-12);
        assert!(generator_adv_loss(&uniform(1.0)).unwrap() < 1e-6);
        assert!((generator_adv_loss(&uniform(0.25)).unwrap() - 1.3862943611198906).abs() < 1e-12);
    }

    #[test]
    fn saturating_form_is_log_one_minus_d() {
        let v = generator_adv_loss_form(&uniform(0.25), GeneratorAdvForm::Saturating).unwrap();
        assert!((v - 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn l1_examples() {
        let ones = Array2::from_elem((3, 3), 1.0);
        let neg = Array2::from_elem((3, 3), -1.0);
        assert_eq!(l1_loss(&ones, &ones).unwrap(), 0.0);
        assert_eq!(l1_loss(&ones, &neg).unwrap(), 2.0);
        assert_eq!(l1_loss(&arr1(&[1.0, 0.5]), &arr1(&[0.0, 0.0])).unwrap(), 0.75);
        assert!(l1_loss(&arr1(&[1.0]), &arr1(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn mse_examples() {
        let ones = Array2::from_elem((3, 3), 1.0);
        let zeros = Array2::zeros((3, 3));
        assert_eq!(mse_loss(&ones, &ones).unwrap(), 0.0);
        assert_eq!(mse_loss(&ones, &zeros).unwrap(), 1.0);
        assert_eq!(mse_loss(&arr1(&[1.0, -1.0]), &arr1(&[0.0, 0.0])).unwrap(), 1.0);
        assert!(mse_loss(&arr1(&[1.0]), &arr1(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn identity_discriminator_examples() {
        let t = [0.0, 1.0, 0.0, 0.0];
        let l = identity_loss_discriminator(&[0.0; 4], &t, &[0.0; 4]).unwrap();
        assert!((l - 2.0 * 4f64.ln()).abs() < 1e-12);

        let perfect = identity_loss_discriminator(&[0.0, 50.0, 0.0, 0.0], &t, &[0.0, 0.0, 0.0, 50.0]).unwrap();
        assert!(perfect < 1e-12);

        // N = 2: CE = ln(e^2 + 2) - 2 for both terms
        let ce = (2f64.exp() + 2.0).ln() - 2.0;
        let l = identity_loss_discriminator(&[2.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, 0.0, 2.0]).unwrap();
        assert!((l - 2.0 * ce).abs() < 1e-12);
        assert!((l - 0.479089532443769).abs() < 1e-12);
    }

    #[test]
    fn identity_labels_on_the_generated_class_are_rejected() {
        assert!(identity_loss_discriminator(&[0.0; 3], &[0.0, 0.0, 1.0], &[0.0; 3]).is_err());
        assert!(identity_loss_generator(&[0.0; 3], &[0.0, 0.0, 1.0]).is_err());
        assert!(identity_loss_generator(&[0.0; 3], &[0.5, 0.5, 0.0]).is_err());
        assert!(identity_loss_generator(&[0.0; 3], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn identity_generator_examples() {
        let t = [0.0, 1.0, 0.0, 0.0];
        assert!((identity_loss_generator(&[0.0; 4], &t).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(identity_loss_generator(&[0.0, 60.0, 0.0, 0.0], &t).unwrap() < 1e-12);
        let expect = (2f64.exp() + 3.0).ln() - 2.0;
        let l = identity_loss_generator(&[0.0, 2.0, 0.0, 0.0], &t).unwrap();
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 0.340752953913131).abs() < 1e-12);
    }

    #[test]
    fn combined_objective() {
        let w = LossWeights::default();
        assert!((tvgan_generator_total(0.7, 0.01, 0.02, &w).unwrap() - 3.7).abs() < 1e-9);
        assert_eq!(tvgan_generator_total(0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        let ablated = LossWeights { lambda2: 0.0, ..w };
        assert_eq!(
            tvgan_generator_total(0.7, 0.01, 0.02, &ablated).unwrap(),
            pix2pix_generator_total(0.7, 0.01, 100.0).unwrap()
        );
        assert!(tvgan_generator_total(f64::NAN, 0.0, 0.0, &w).is_err());
        assert!(LossWeights { lambda1: -1.0, lambda2: 0.0 }.validate().is_err());
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let (_, g) = softmax_cross_entropy_grad(&[0.3, -1.0, 2.0], 1).unwrap();
        assert!(g.sum().abs() < 1e-12);
        assert!(g[1] < 0.0);
    }

    proptest! {
        #[test]
        fn losses_are_non_negative(
            real in proptest::collection::vec(0.0f64..=1.0, 1..16),
            fake in proptest::collection::vec(0.0f64..=1.0, 1..16),
            logits in proptest::collection::vec(-20.0f64..20.0, 2..8),
            y in proptest::collection::vec(-1.0f64..=1.0, 8),
            y_hat in proptest::collection::vec(-1.0f64..=1.0, 8),
        ) {
            let r = Array1::from(real);
            let f = Array1::from(fake);
            prop_assert!(discriminator_adv_loss(&r, &f).unwrap() >= 0.0);
            prop_assert!(generator_adv_loss(&f).unwrap() >= 0.0);
            let y = Array1::from(y);
            let yh = Array1::from(y_hat);
            prop_assert!(l1_loss(&y, &yh).unwrap() >= 0.0);
            prop_assert!(mse_loss(&y, &yh).unwrap() >= 0.0);
            let n = logits.len();
            let mut label = vec![0.0; n];
            label[0] = 1.0;
            prop_assert!(identity_loss_generator(&logits, &label).unwrap() >= 0.0);
            prop_assert!(identity_loss_discriminator(&logits, &label, &logits).unwrap() >= 0.0);
        }

        #[test]
        fn discriminator_identity_loss_decomposes(
            a in proptest::collection::vec(-10.0f64..10.0, 4),
            b in proptest::collection::vec(-10.0f64..10.0, 4),
            k in 0usize..3,
        ) {
            let mut label = vec![0.0; 4];
            label[k] = 1.0;
            let whole = identity_loss_discriminator(&a, &label, &b).unwrap();
            // independent parts: plain softmax probabilities
            let ce = |v: &[f64], t: usize| {
                let z: f64 = v.iter().map(|x| x.exp()).sum();
                -(v[t].exp() / z).ln()
            };
            prop_assert!((whole - (ce(&a, k) + ce(&b, 3))).abs() < 1e-9);
        }
    }
}
