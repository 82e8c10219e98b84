//! Local training strategies: plain SGD (FedAvg), proximal SGD (FedProx),
//! variance-reduced SGD with control variates (SCAFFOLD), and
//! knowledge-distillation training on generated data (FedCOG).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::generation::GeneratedDataset;
use crate::nn::{
    backward, kl_divergence, sgd_step_params, softmax, LossSpec, LossTerm, ModelParams, Wrt,
};
use crate::tensor::Tensor;
use crate::util::mix_seed;

#[derive(Debug, Clone, PartialEq)]
pub enum TrainerKind {
    FedAvg,
    FedProx { mu: f64 },
    Scaffold,
    FedCog { lambda_kd: f64, adaptive_weights: bool },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalRunConfig {
    /// Local SGD iterations per round.
    pub tau: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for LocalRunConfig {
    fn default() -> Self {
        LocalRunConfig {
            tau: 400,
            lr: 0.01,
            batch_size: 64,
        }
    }
}

impl LocalRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("local lr must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub mean_loss: f64,
}

/// Mini-batch index stream with seeded reshuffling each epoch.
struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha12Rng,
}

impl BatchStream {
    fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        let mut s = BatchStream {
            order: (0..n).collect(),
            pos: 0,
            batch_size: batch_size.min(n),
            rng: ChaCha12Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.reshuffle();
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        batch
    }
}

fn check_nonempty(ds: &LabeledDataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Input("empty local dataset".into()));
    }
    Ok(())
}

/// tau steps of mini-batch SGD on cross-entropy, starting from a copy of
/// the global model.
pub fn local_train_fedavg(
    theta_global: &ModelParams,
    ds: &LabeledDataset,
    cfg: &LocalRunConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    local_train_proximal(theta_global, ds, cfg, 0.0, seed)
}

/// FedProx: adds (mu/2)||theta - theta_global||^2 to every step's loss.
/// mu = 0 reduces bitwise to FedAvg.
pub fn local_train_fedprox(
    theta_global: &ModelParams,
    ds: &LabeledDataset,
    cfg: &LocalRunConfig,
    mu: f64,
    seed: u64,
) -> Result<TrainOutcome> {
    if mu < 0.0 {
        return Err(Error::Config("fedprox mu must be >= 0".into()));
    }
    local_train_proximal(theta_global, ds, cfg, mu, seed)
}

fn local_train_proximal(
    theta_global: &ModelParams,
    ds: &LabeledDataset,
    cfg: &LocalRunConfig,
    mu: f64,
    seed: u64,
) -> Result<TrainOutcome> {
    check_nonempty(ds)?;
    cfg.validate()?;
    let mut theta = theta_global.clone();
    let mut stream = BatchStream::new(ds.len(), cfg.batch_size, mix_seed(&[seed, 0x01]));
    let mut loss_sum = 0.0;
    for _ in 0..cfg.tau {
        let idx = stream.next_batch();
        let batch = ds.features.gather_rows(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        let mut spec = LossSpec::new().with(1.0, LossTerm::CrossEntropy { labels: &labels });
        if mu != 0.0 {
            spec = spec.with(mu, LossTerm::L2ToReference { reference: theta_global });
        }
        let (loss, grads) = backward(&theta, &batch, &spec, Wrt::Params)?;
        sgd_step_params(&mut theta, &grads.params.expect("param grads"), cfg.lr);
        loss_sum += loss;
    }
    Ok(TrainOutcome {
        model: theta,
        mean_loss: if cfg.tau == 0 { 0.0 } else { loss_sum / cfg.tau as f64 },
    })
}

#[derive(Debug, Clone)]
pub struct ScaffoldOutcome {
    pub model: ModelParams,
    pub new_c_k: ModelParams,
    pub delta_c: ModelParams,
    pub mean_loss: f64,
}

/// SCAFFOLD local step: every gradient is corrected by (c_global - c_k);
/// the client variate is refreshed with the option-II rule
/// c_k <- c_k - c_global + (theta_global - theta_final) / (tau * lr).
pub fn local_train_scaffold(
    theta_global: &ModelParams,
    ds: &LabeledDataset,
    cfg: &LocalRunConfig,
    c_global: &ModelParams,
    c_k: &ModelParams,
    seed: u64,
) -> Result<ScaffoldOutcome> {
    check_nonempty(ds)?;
    cfg.validate()?;
    if !c_global.same_shape(theta_global) || !c_k.same_shape(theta_global) {
        return Err(Error::Shape("control variate shape mismatch".into()));
    }
    let mut theta = theta_global.clone();
    let mut stream = BatchStream::new(ds.len(), cfg.batch_size, mix_seed(&[seed, 0x01]));
    let mut loss_sum = 0.0;
    for _ in 0..cfg.tau {
        let idx = stream.next_batch();
        let batch = ds.features.gather_rows(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        let spec = LossSpec::new().with(1.0, LossTerm::CrossEntropy { labels: &labels });
        let (loss, grads) = backward(&theta, &batch, &spec, Wrt::Params)?;
        let mut g = grads.params.expect("param grads");
        g.axpy(1.0, c_global);
        g.axpy(-1.0, c_k);
        sgd_step_params(&mut theta, &g, cfg.lr);
        loss_sum += loss;
    }
    let (new_c_k, delta_c) = if cfg.tau == 0 {
        (c_k.clone(), c_k.zeros_like())
    } else {
        // option II: c_k' = c_k - c_global + (theta_global - theta_final)/(tau*lr)
        let mut new_c = c_k.clone();
        new_c.axpy(-1.0, c_global);
        let scale = 1.0 / (cfg.tau as f64 * cfg.lr);
        let mut drift = theta_global.clone();
        drift.axpy(-1.0, &theta);
        new_c.axpy(scale, &drift);
        let mut delta = new_c.clone();
        delta.axpy(-1.0, c_k);
        (new_c, delta)
    };
    Ok(ScaffoldOutcome {
        model: theta,
        new_c_k,
        delta_c,
        mean_loss: if cfg.tau == 0 { 0.0 } else { loss_sum / cfg.tau as f64 },
    })
}

/// KL(teacher || softmax(student_logits)); gradients flow only to the
/// student when used inside `backward`.
pub fn kd_loss(teacher_probs: &Tensor, student_logits: &Tensor) -> Result<f64> {
    kl_divergence(teacher_probs, &softmax(student_logits)?)
}

/// Hyper-parameter-free KD coefficients: (N_real, N_gen) normalized.
pub fn adaptive_kd_coefficients(n_real: usize, n_gen: usize) -> Result<(f64, f64)> {
    let total = n_real + n_gen;
    if total == 0 {
        return Err(Error::Config("adaptive KD needs N_real + N_gen >= 1".into()));
    }
    let w_task = n_real as f64 / total as f64;
    Ok((w_task, 1.0 - w_task))
}

/// FedCOG local training: each step pairs a real mini-batch (task loss)
/// with a generated mini-batch (KD against cached teacher soft labels).
/// Weights are (1, lambda_kd), or the sample-count ratios when
/// `kd_weights` was computed adaptively by the caller.
pub fn local_train_fedcog(
    theta_global: &ModelParams,
    ds: &LabeledDataset,
    gen: &GeneratedDataset,
    cfg: &LocalRunConfig,
    weights: (f64, f64),
    seed: u64,
) -> Result<TrainOutcome> {
    check_nonempty(ds)?;
    cfg.validate()?;
    let (w_task, w_kd) = weights;
    if w_kd > 0.0 && gen.is_empty() {
        return Err(Error::Input("KD weight > 0 but generated dataset empty".into()));
    }
    let mut theta = theta_global.clone();
    let mut real_stream = BatchStream::new(ds.len(), cfg.batch_size, mix_seed(&[seed, 0x01]));
    let mut gen_stream = if gen.is_empty() {
        None
    } else {
        Some(BatchStream::new(
            gen.len(),
            cfg.batch_size,
            mix_seed(&[seed, 0x02]),
        ))
    };
    let mut loss_sum = 0.0;
    for _ in 0..cfg.tau {
        let idx = real_stream.next_batch();
        let batch = ds.features.gather_rows(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        let spec = LossSpec::new().with(w_task, LossTerm::CrossEntropy { labels: &labels });
        let (task_loss, task_grads) = backward(&theta, &batch, &spec, Wrt::Params)?;
        let mut g = task_grads.params.expect("param grads");
        let mut step_loss = task_loss;
        if w_kd > 0.0 {
            let stream = gen_stream.as_mut().expect("generated stream");
            let gidx = stream.next_batch();
            let gen_batch = gen.inputs.gather_rows(&gidx);
            let teacher = gen.teacher_probs.gather_rows(&gidx);
            let kd_spec =
                LossSpec::new().with(w_kd, LossTerm::KlToTeacher { teacher_probs: &teacher });
            let (kd, kd_grads) = backward(&theta, &gen_batch, &kd_spec, Wrt::Params)?;
            g.axpy(1.0, &kd_grads.params.expect("param grads"));
            step_loss += kd;
        }
        sgd_step_params(&mut theta, &g, cfg.lr);
        loss_sum += step_loss;
    }
    Ok(TrainOutcome {
        model: theta,
        mean_loss: if cfg.tau == 0 { 0.0 } else { loss_sum / cfg.tau as f64 },
    })
}
