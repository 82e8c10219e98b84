//! Evaluation, heterogeneity diagnostics, and executable theory checks
//! (non-increasing-loss identity and the convergence bound calculator).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::generation::GeneratedDataset;
use crate::nn::{forward, softmax, cross_entropy, ModelParams};
use crate::trainers::kd_loss;

/// Top-1 accuracy; argmax ties break toward the lowest class index.
pub fn evaluate_accuracy(model: &ModelParams, test: &LabeledDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let logits = forward(model, &test.features)?;
    let mut correct = 0usize;
    for (r, &label) in test.labels.iter().enumerate() {
        let row = logits.row(r);
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Per-class stratified holdout. Classes with fewer than 2 samples stay
/// entirely in the train part; those classes are reported in `notes`.
pub fn personalized_split(
    ds: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, Vec<String>)> {
    if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::Config(format!("split fraction {fraction} not in (0, 1)")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut by_class = vec![Vec::new(); ds.num_classes];
    for (i, &label) in ds.labels.iter().enumerate() {
        by_class[label].push(i);
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    let mut notes = Vec::new();
    for (c, mut idx) in by_class.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            notes.push(format!("class {c} has a single sample; kept in train"));
            train_idx.extend(idx);
            continue;
        }
        idx.shuffle(&mut rng);
        let n_test = ((idx.len() as f64 * fraction).round() as usize)
            .clamp(1, idx.len() - 1);
        test_idx.extend_from_slice(&idx[..n_test]);
        train_idx.extend_from_slice(&idx[n_test..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((ds.subset(&train_idx), ds.subset(&test_idx), notes))
}

/// l2 distance over all parameters.
pub fn model_difference(a: &ModelParams, b: &ModelParams) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape("model_difference shape mismatch".into()));
    }
    let sq: f64 = a
        .flat_iter()
        .zip(b.flat_iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sq.sqrt())
}

/// Assumption constants and schedule for the convergence bound.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoremInputs {
    /// Phi(theta_0; D_0) - Phi_inf.
    pub phi0_minus_inf: f64,
    pub l: f64,
    pub sigma: f64,
    pub kappa: f64,
    pub beta_sq: f64,
    pub tau: usize,
    pub eta: f64,
    pub t: usize,
    /// Aggregation weights p_k, summing to 1.
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoremBound {
    pub terms: [f64; 4],
    pub total: f64,
}

/// The four-term optimization-error bound. Errors out, naming the branch,
/// when the step-size condition eta*L <= min{1/(2 tau),
/// 1/sqrt(2 tau (tau-1) (2 beta^2 + 1))} is violated.
pub fn theorem_bound(inp: &TheoremInputs) -> Result<TheoremBound> {
    if inp.l <= 0.0 || inp.sigma < 0.0 || inp.kappa < 0.0 || inp.beta_sq < 1.0 {
        return Err(Error::Input(
            "need L > 0, sigma >= 0, kappa >= 0, beta^2 >= 1".into(),
        ));
    }
    if inp.tau == 0 || inp.t == 0 || inp.eta <= 0.0 {
        return Err(Error::Input("need tau >= 1, T >= 1, eta > 0".into()));
    }
    let psum: f64 = inp.p.iter().sum();
    if inp.p.is_empty() || (psum - 1.0).abs() > 1e-9 || inp.p.iter().any(|&w| w < 0.0) {
        return Err(Error::Input("weights p must be nonnegative and sum to 1".into()));
    }
    let tau = inp.tau as f64;
    let eta_l = inp.eta * inp.l;
    if eta_l > 1.0 / (2.0 * tau) + 1e-15 {
        return Err(Error::Input(format!(
            "step-size condition violated: eta*L = {eta_l} > 1/(2 tau) = {}",
            1.0 / (2.0 * tau)
        )));
    }
    if inp.tau > 1 {
        let cap = 1.0 / (2.0 * tau * (tau - 1.0) * (2.0 * inp.beta_sq + 1.0)).sqrt();
        if eta_l > cap + 1e-15 {
            return Err(Error::Input(format!(
                "step-size condition violated: eta*L = {eta_l} > \
                 1/sqrt(2 tau (tau-1)(2 beta^2+1)) = {cap}"
            )));
        }
    }
    let t = inp.t as f64;
    let p_sq: f64 = inp.p.iter().map(|&w| w * w).sum();
    let terms = [
        4.0 * inp.phi0_minus_inf / (tau * inp.eta * t),
        4.0 * inp.eta * inp.l * inp.sigma * inp.sigma * p_sq,
        3.0 * (tau - 1.0) * inp.eta * inp.eta * inp.sigma * inp.sigma * inp.l * inp.l,
        6.0 * tau * (tau - 1.0) * inp.eta * inp.eta * inp.l * inp.l * inp.kappa * inp.kappa,
    ];
    Ok(TheoremBound {
        terms,
        total: terms.iter().sum(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lemma1Outcome {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Non-increasing global loss identity: evaluating the model's objective
/// with a generated dataset whose teacher is the model itself can never
/// exceed the same objective with any older generated dataset.
pub fn lemma1_check(
    model: &ModelParams,
    gen_new: &GeneratedDataset,
    gen_old: &GeneratedDataset,
    eval_ds: &LabeledDataset,
) -> Result<Lemma1Outcome> {
    let probs = softmax(&forward(model, &eval_ds.features)?)?;
    let ce = cross_entropy(&probs, &eval_ds.labels)?;
    let lhs = ce + kd_loss(&gen_new.teacher_probs, &forward(model, &gen_new.inputs)?)?;
    let rhs = ce + kd_loss(&gen_old.teacher_probs, &forward(model, &gen_old.inputs)?)?;
    Ok(Lemma1Outcome {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-9,
    })
}
