//! Minimal dense MLP engine: forward pass plus analytic backward pass with
//! respect to parameters and/or inputs, for a fixed family of composite
//! losses (cross-entropy, KL to a frozen teacher, Jensen-Shannon
//! disagreement against a frozen second model, L2 proximal anchor).
//!
//! Hidden layers use ReLU, the output layer is identity; losses apply
//! softmax themselves. All logs are natural.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Clamp applied inside every log to avoid -inf.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// [out x in]
    pub weight: Tensor,
    /// [out]
    pub bias: Tensor,
}

/// Ordered dense layers; adjacent dimensions must chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<DenseLayer>,
}

impl ModelParams {
    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer {
                weight: Tensor::zeros(vec![w[1], w[0]]),
                bias: Tensor::zeros(vec![w[1]]),
            })
            .collect();
        ModelParams { layers }
    }

    /// He-scaled Gaussian init, deterministic per seed.
    pub fn random_init(dims: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut model = ModelParams::zeros(dims);
        for layer in &mut model.layers {
            let fan_in = layer.weight.cols() as f64;
            let std = (2.0 / fan_in).sqrt();
            for w in layer.weight.data_mut() {
                let g: f64 = rng.sample(StandardNormal);
                *w = std * g;
            }
        }
        model
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.rows()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.weight.rows()));
        d
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams::zeros(&self.dims())
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.shape() == b.weight.shape() && a.bias.shape() == b.bias.shape())
    }

    /// self += a * other, layer by layer.
    pub fn axpy(&mut self, a: f64, other: &ModelParams) {
        debug_assert!(self.same_shape(other));
        for (l, o) in self.layers.iter_mut().zip(&other.layers) {
            l.weight.axpy(a, &o.weight);
            l.bias.axpy(a, &o.bias);
        }
    }

    pub fn scale(&mut self, a: f64) {
        for l in &mut self.layers {
            l.weight.scale(a);
            l.bias.scale(a);
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Flat iteration over all parameter values in a fixed order.
    pub fn flat_iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.data().iter()))
    }

    pub fn flat_iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.data_mut().iter_mut().chain(l.bias.data_mut().iter_mut()))
    }
}

/// Gradients with respect to parameters and/or the input batch.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Option<ModelParams>,
    pub inputs: Option<Tensor>,
}

/// Which gradients `backward` should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    Params,
    Inputs,
    Both,
}

impl Wrt {
    fn wants_params(self) -> bool {
        matches!(self, Wrt::Params | Wrt::Both)
    }
    fn wants_inputs(self) -> bool {
        matches!(self, Wrt::Inputs | Wrt::Both)
    }
}

/// One weighted term of a composite objective. Models and teacher
/// distributions referenced here are frozen: they receive no parameter
/// gradients of their own.
#[derive(Debug)]
pub enum LossTerm<'a> {
    CrossEntropy { labels: &'a [usize] },
    KlToTeacher { teacher_probs: &'a Tensor },
    JsDisagreement { other: &'a ModelParams },
    L2ToReference { reference: &'a ModelParams },
}

#[derive(Debug)]
pub struct WeightedTerm<'a> {
    pub weight: f64,
    pub term: LossTerm<'a>,
}

#[derive(Debug, Default)]
pub struct LossSpec<'a> {
    pub terms: Vec<WeightedTerm<'a>>,
}

impl<'a> LossSpec<'a> {
    pub fn new() -> Self {
        LossSpec { terms: Vec::new() }
    }

    pub fn with(mut self, weight: f64, term: LossTerm<'a>) -> Self {
        self.terms.push(WeightedTerm { weight, term });
        self
    }
}

struct ForwardTrace {
    /// activations[0] is the input batch; the last entry holds the logits.
    activations: Vec<Tensor>,
}

fn forward_trace(model: &ModelParams, batch: &Tensor) -> Result<ForwardTrace> {
    if batch.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "batch must be 2-d, got {:?}",
            batch.shape()
        )));
    }
    if batch.cols() != model.input_dim() {
        return Err(Error::Shape(format!(
            "batch dim {} does not match model input dim {}",
            batch.cols(),
            model.input_dim()
        )));
    }
    let last = model.layers.len() - 1;
    let mut activations = Vec::with_capacity(model.layers.len() + 1);
    activations.push(batch.clone());
    for (li, layer) in model.layers.iter().enumerate() {
        let x = activations.last().unwrap();
        // z = x * W^T + b
        let z = x.view2().dot(&layer.weight.view2().t());
        let mut out = Tensor::new(vec![x.rows(), layer.weight.rows()], z.into_raw_vec_and_offset().0)?;
        let bias = layer.bias.data();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        if li < last {
            for v in out.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        activations.push(out);
    }
    Ok(ForwardTrace { activations })
}

/// Forward pass; returns raw logits [N x C].
pub fn forward(model: &ModelParams, batch: &Tensor) -> Result<Tensor> {
    let mut trace = forward_trace(model, batch)?;
    let logits = trace.activations.pop().unwrap();
    logits.check_finite("forward logits")?;
    Ok(logits)
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    logits.check_finite("softmax input")?;
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Mean over the batch of -ln(p[label]).
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probability rows vs {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    let c = probs.cols();
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::Input(format!("label {label} out of range 0..{c}")));
        }
        total -= probs.row(r)[label].max(LOG_EPS).ln();
    }
    Ok(total / labels.len() as f64)
}

fn kl_row(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| a * (a.max(LOG_EPS) / b.max(LOG_EPS)).ln())
        .sum()
}

/// Mean over the batch of KL(p_row || q_row).
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::Shape("kl_divergence shape mismatch".into()));
    }
    let n = p.rows();
    let total: f64 = (0..n).map(|r| kl_row(p.row(r), q.row(r))).sum();
    Ok(total / n as f64)
}

/// Disagreement loss 1 - JSD(p_g, p_l), averaged over the batch.
/// Range [1 - ln 2, 1]; equals 1 iff the rows coincide.
pub fn js_disagreement(p_g: &Tensor, p_l: &Tensor) -> Result<f64> {
    if p_g.shape() != p_l.shape() {
        return Err(Error::Shape("js_disagreement shape mismatch".into()));
    }
    let n = p_g.rows();
    let mut total = 0.0;
    for r in 0..n {
        let a = p_g.row(r);
        let b = p_l.row(r);
        let m: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
        total += 1.0 - 0.5 * (kl_row(a, &m) + kl_row(b, &m));
    }
    Ok(total / n as f64)
}

/// Backpropagates `dlogits` through the traced network. Returns parameter
/// gradients (if requested) and the gradient at the input batch (if
/// requested).
fn backprop(
    model: &ModelParams,
    trace: &ForwardTrace,
    dlogits: &Tensor,
    want_params: bool,
    want_inputs: bool,
) -> (Option<ModelParams>, Option<Tensor>) {
    let mut pgrads = want_params.then(|| model.zeros_like());
    let mut delta = dlogits.clone();
    for li in (0..model.layers.len()).rev() {
        let layer = &model.layers[li];
        if let Some(pg) = pgrads.as_mut() {
            // dW = delta^T * activation_in
            let dw = delta.view2().t().dot(&trace.activations[li].view2());
            pg.layers[li]
                .weight
                .data_mut()
                .copy_from_slice(dw.as_slice().unwrap());
            let db = pg.layers[li].bias.data_mut();
            for r in 0..delta.rows() {
                for (g, &d) in db.iter_mut().zip(delta.row(r)) {
                    *g += d;
                }
            }
        }
        if li == 0 && !want_inputs {
            break;
        }
        // d(prev activation) = delta * W
        let dx = delta.view2().dot(&layer.weight.view2());
        let mut dprev = Tensor::new(
            vec![delta.rows(), layer.weight.cols()],
            dx.into_raw_vec_and_offset().0,
        )
        .unwrap();
        if li > 0 {
            // ReLU mask from the stored post-activation.
            let act = &trace.activations[li];
            for (g, &a) in dprev.data_mut().iter_mut().zip(act.data()) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        delta = dprev;
    }
    let igrads = want_inputs.then_some(delta);
    (pgrads, igrads)
}

/// Softmax Jacobian-transpose product: given probs row p and upstream dL/dp
/// row v, writes dL/dz = p .* (v - <p, v>) into `out`.
fn softmax_backward_row(p: &[f64], v: &[f64], out: &mut [f64]) {
    let dot: f64 = p.iter().zip(v).map(|(a, b)| a * b).sum();
    for ((o, &pi), &vi) in out.iter_mut().zip(p).zip(v) {
        *o += pi * (vi - dot);
    }
}

/// Evaluates the composite objective and its gradients in one pass.
///
/// Teacher distributions, disagreement counterpart models and proximal
/// references are frozen; only `model` (and the batch, when requested)
/// receive gradients.
pub fn backward(
    model: &ModelParams,
    batch: &Tensor,
    spec: &LossSpec,
    wrt: Wrt,
) -> Result<(f64, Gradients)> {
    if spec.terms.is_empty() {
        return Err(Error::Input("empty loss spec".into()));
    }
    let trace = forward_trace(model, batch)?;
    let logits = trace.activations.last().unwrap();
    let probs = softmax(logits)?;
    let n = batch.rows();
    let inv_n = 1.0 / n as f64;

    let mut loss = 0.0;
    let mut dlogits = Tensor::zeros(vec![probs.rows(), probs.cols()]);
    // Parameter-space terms (proximal anchors) bypass the network.
    let mut extra_pgrads: Option<ModelParams> = None;
    // Input gradients flowing through a frozen counterpart model (JS term).
    let mut extra_igrads: Option<Tensor> = None;

    for wt in &spec.terms {
        let w = wt.weight;
        match &wt.term {
            LossTerm::CrossEntropy { labels } => {
                loss += w * cross_entropy(&probs, labels)?;
                for (r, &label) in labels.iter().enumerate() {
                    let p = probs.row(r);
                    let d = dlogits.row_mut(r);
                    for (c, (g, &pc)) in d.iter_mut().zip(p).enumerate() {
                        let target = if c == label { 1.0 } else { 0.0 };
                        *g += w * inv_n * (pc - target);
                    }
                }
            }
            LossTerm::KlToTeacher { teacher_probs } => {
                loss += w * kl_divergence(teacher_probs, &probs)?;
                for r in 0..n {
                    let p = probs.row(r);
                    let t = teacher_probs.row(r);
                    let d = dlogits.row_mut(r);
                    for ((g, &pc), &tc) in d.iter_mut().zip(p).zip(t) {
                        *g += w * inv_n * (pc - tc);
                    }
                }
            }
            LossTerm::JsDisagreement { other } => {
                let other_trace = forward_trace(other, batch)?;
                let other_logits = other_trace.activations.last().unwrap();
                let other_probs = softmax(other_logits)?;
                loss += w * js_disagreement(&probs, &other_probs)?;
                let mut d_other_logits =
                    Tensor::zeros(vec![other_probs.rows(), other_probs.cols()]);
                for r in 0..n {
                    let p = probs.row(r);
                    let q = other_probs.row(r);
                    // dL_dis/dp = -1/2 ln(p/m), m = (p+q)/2 (chain through softmax).
                    let dp: Vec<f64> = p
                        .iter()
                        .zip(q)
                        .map(|(&a, &b)| {
                            let m = 0.5 * (a + b);
                            -0.5 * w * inv_n * (a.max(LOG_EPS) / m.max(LOG_EPS)).ln()
                        })
                        .collect();
                    softmax_backward_row(p, &dp, dlogits.row_mut(r));
                    if wrt.wants_inputs() {
                        let dq: Vec<f64> = p
                            .iter()
                            .zip(q)
                            .map(|(&a, &b)| {
                                let m = 0.5 * (a + b);
                                -0.5 * w * inv_n * (b.max(LOG_EPS) / m.max(LOG_EPS)).ln()
                            })
                            .collect();
                        softmax_backward_row(q, &dq, d_other_logits.row_mut(r));
                    }
                }
                if wrt.wants_inputs() {
                    let (_, ig) = backprop(other, &other_trace, &d_other_logits, false, true);
                    match extra_igrads.as_mut() {
                        Some(acc) => acc.axpy(1.0, &ig.unwrap()),
                        None => extra_igrads = ig,
                    }
                }
            }
            LossTerm::L2ToReference { reference } => {
                if !model.same_shape(reference) {
                    return Err(Error::Shape("proximal reference shape mismatch".into()));
                }
                let mut sq = 0.0;
                for (a, b) in model.flat_iter().zip(reference.flat_iter()) {
                    let d = a - b;
                    sq += d * d;
                }
                loss += w * 0.5 * sq;
                if wrt.wants_params() {
                    let pg = extra_pgrads.get_or_insert_with(|| model.zeros_like());
                    for ((g, a), b) in pg
                        .flat_iter_mut()
                        .zip(model.flat_iter())
                        .zip(reference.flat_iter())
                    {
                        *g += w * (a - b);
                    }
                }
            }
        }
    }

    let (mut pgrads, mut igrads) = backprop(
        model,
        &trace,
        &dlogits,
        wrt.wants_params(),
        wrt.wants_inputs(),
    );
    if let (Some(pg), Some(extra)) = (pgrads.as_mut(), extra_pgrads.as_ref()) {
        pg.axpy(1.0, extra);
    }
    if let (Some(ig), Some(extra)) = (igrads.as_mut(), extra_igrads.as_ref()) {
        ig.axpy(1.0, extra);
    }
    Ok((
        loss,
        Gradients {
            params: pgrads,
            inputs: igrads,
        },
    ))
}

/// In-place SGD step x <- x - lr * g on model parameters.
pub fn sgd_step_params(params: &mut ModelParams, grads: &ModelParams, lr: f64) {
    params.axpy(-lr, grads);
}

/// In-place SGD step on a tensor (learnable inputs).
pub fn sgd_step_inputs(inputs: &mut Tensor, grads: &Tensor, lr: f64) {
    inputs.axpy(-lr, grads);
}
