//! Central finite-difference verification of analytic gradients.
//!
//! Loss values for the perturbed points are recomputed from the public
//! forward/softmax/divergence ops only, independently of `nn::backward`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::nn::{
    backward, cross_entropy, forward, js_disagreement, kl_divergence, softmax, LossSpec,
    LossTerm, ModelParams, Wrt,
};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-7;

/// Composite loss evaluated term by term through the public ops.
pub fn eval_loss(model: &ModelParams, batch: &Tensor, spec: &LossSpec) -> Result<f64> {
    let mut loss = 0.0;
    let probs = softmax(&forward(model, batch)?)?;
    for wt in &spec.terms {
        loss += wt.weight
            * match &wt.term {
                LossTerm::CrossEntropy { labels } => cross_entropy(&probs, labels)?,
                LossTerm::KlToTeacher { teacher_probs } => kl_divergence(teacher_probs, &probs)?,
                LossTerm::JsDisagreement { other } => {
                    let q = softmax(&forward(other, batch)?)?;
                    js_disagreement(&probs, &q)?
                }
                LossTerm::L2ToReference { reference } => {
                    let sq: f64 = model
                        .flat_iter()
                        .zip(reference.flat_iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    0.5 * sq
                }
            };
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

impl CheckReport {
    fn absorb(&mut self, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
        }
        self.checked += 1;
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL
    }
}

/// Compares every parameter and input gradient of `backward` against
/// central finite differences of `eval_loss`.
pub fn check_gradients(model: &ModelParams, batch: &Tensor, spec: &LossSpec) -> Result<CheckReport> {
    let (_, grads) = backward(model, batch, spec, Wrt::Both)?;
    let mut report = CheckReport::default();

    let pg = grads.params.expect("param grads requested");
    let n_params = model.num_params();
    for i in 0..n_params {
        let mut plus = model.clone();
        *plus.flat_iter_mut().nth(i).unwrap() += FD_STEP;
        let mut minus = model.clone();
        *minus.flat_iter_mut().nth(i).unwrap() -= FD_STEP;
        let numeric =
            (eval_loss(&plus, batch, spec)? - eval_loss(&minus, batch, spec)?) / (2.0 * FD_STEP);
        let analytic = *pg.flat_iter().nth(i).unwrap();
        report.absorb(analytic, numeric);
    }

    let ig = grads.inputs.expect("input grads requested");
    for i in 0..batch.len() {
        let mut plus = batch.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = batch.clone();
        minus.data_mut()[i] -= FD_STEP;
        let numeric =
            (eval_loss(model, &plus, spec)? - eval_loss(model, &minus, spec)?) / (2.0 * FD_STEP);
        report.absorb(ig.data()[i], numeric);
    }
    Ok(report)
}

fn random_probs(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![rows, cols]);
    for r in 0..rows {
        let row = t.row_mut(r);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = rng.gen_range(0.05..1.0);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    t
}

fn random_batch(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![rows, cols]);
    for v in t.data_mut() {
        // Offset away from zero keeps pre-activations off the ReLU kink.
        *v = rng.gen_range(-1.0..1.0) + 0.05;
    }
    t
}

/// Smallest |pre-activation| over all hidden units and batch rows. A value
/// inside the finite-difference step would put the central difference on
/// the wrong side of the ReLU kink, where the comparison is meaningless.
fn min_hidden_preactivation(model: &ModelParams, batch: &Tensor) -> f64 {
    let mut x = batch.clone();
    let mut min_abs = f64::INFINITY;
    let n_layers = model.layers.len();
    for (li, layer) in model.layers.iter().enumerate() {
        let out = layer.weight.rows();
        let mut z = Tensor::zeros(vec![x.rows(), out]);
        for r in 0..x.rows() {
            let xr = x.row(r).to_vec();
            let zr = z.row_mut(r);
            for (o, zo) in zr.iter_mut().enumerate() {
                let w = layer.weight.row(o);
                *zo = layer.bias.data()[o]
                    + w.iter().zip(&xr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        if li + 1 < n_layers {
            for v in z.data() {
                min_abs = min_abs.min(v.abs());
            }
            for v in z.data_mut() {
                *v = v.max(0.0);
            }
        }
        x = z;
    }
    min_abs
}

const KINK_MARGIN: f64 = 1e-3;

/// Runs the full sweep: `trials` random small nets, every loss composition.
/// Returns the worst relative error observed.
pub fn run_suite(trials: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut worst = CheckReport::default();
    for trial in 0..trials {
        let hidden = 2 + (trial % 3);
        let dims = [4, hidden + 3, hidden, 3];
        let model = ModelParams::random_init(&dims, seed.wrapping_add(trial as u64 + 1));
        let other = ModelParams::random_init(&dims, seed.wrapping_add(1000 + trial as u64));
        let reference = ModelParams::random_init(&dims, seed.wrapping_add(2000 + trial as u64));
        let n = 3;
        let mut batch = random_batch(&mut rng, n, dims[0]);
        // Resample batches that park a hidden unit on the ReLU kink (for
        // either model touched by the loss terms); the analytic subgradient
        // is still valid there but finite differences are not.
        for _ in 0..100 {
            if min_hidden_preactivation(&model, &batch) > KINK_MARGIN
                && min_hidden_preactivation(&other, &batch) > KINK_MARGIN
            {
                break;
            }
            batch = random_batch(&mut rng, n, dims[0]);
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..dims[3])).collect();
        let teacher = random_probs(&mut rng, n, dims[3]);

        let singles: Vec<LossSpec> = vec![
            LossSpec::new().with(1.0, LossTerm::CrossEntropy { labels: &labels }),
            LossSpec::new().with(1.0, LossTerm::KlToTeacher { teacher_probs: &teacher }),
            LossSpec::new().with(1.0, LossTerm::JsDisagreement { other: &other }),
            LossSpec::new().with(1.0, LossTerm::L2ToReference { reference: &reference }),
            LossSpec::new()
                .with(1.0, LossTerm::CrossEntropy { labels: &labels })
                .with(0.1, LossTerm::JsDisagreement { other: &other }),
            LossSpec::new()
                .with(0.7, LossTerm::CrossEntropy { labels: &labels })
                .with(0.01, LossTerm::KlToTeacher { teacher_probs: &teacher })
                .with(0.05, LossTerm::L2ToReference { reference: &reference }),
            LossSpec::new()
                .with(0.3, LossTerm::KlToTeacher { teacher_probs: &teacher })
                .with(0.2, LossTerm::JsDisagreement { other: &other })
                .with(0.4, LossTerm::CrossEntropy { labels: &labels }),
        ];
        for spec in &singles {
            let report = check_gradients(&model, &batch, spec)?;
            if report.max_rel_err > worst.max_rel_err {
                worst.max_rel_err = report.max_rel_err;
            }
            worst.checked += report.checked;
        }
    }
    Ok(worst)
}
