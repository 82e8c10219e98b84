//! Consensus-oriented data generation: optimizes learnable input tensors
//! against cross-entropy on the (frozen) global model plus a disagreement
//! term between global and local model outputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::data::{allocate_target_labels, LabelHistogram, LabelStrategy};
use crate::data::complementary_distribution;
use crate::error::{Error, Result};
use crate::nn::{
    backward, cross_entropy, forward, js_disagreement, sgd_step_inputs, softmax, LossSpec,
    LossTerm, ModelParams, Wrt,
};
use crate::tensor::Tensor;
use crate::util::mix_seed;

#[derive(Debug, Clone, PartialEq)]
pub enum TargetLabelStrategy {
    Uniform,
    Complementary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub num_samples: usize,
    pub steps: usize,
    pub lr_gen: f64,
    pub lambda_dis: f64,
    pub label_strategy: TargetLabelStrategy,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_samples: 256,
            steps: 100,
            lr_gen: 0.1,
            lambda_dis: 0.1,
            label_strategy: TargetLabelStrategy::Complementary,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::Config("gen num_samples must be >= 1".into()));
        }
        if self.lr_gen <= 0.0 {
            return Err(Error::Config("lr_gen must be > 0".into()));
        }
        if self.lambda_dis < 0.0 {
            return Err(Error::Config("lambda_dis must be >= 0".into()));
        }
        Ok(())
    }
}

/// Generated dataset with cached teacher (global model) soft labels.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset {
    /// [N x D], clamped to [0, 1].
    pub inputs: Tensor,
    pub targets: Vec<usize>,
    /// p(global; inputs) on the emitted (clamped) inputs, [N x C].
    pub teacher_probs: Tensor,
}

impl GeneratedDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Standard-Gaussian learnable input initialization, deterministic per seed.
pub fn init_inputs(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(vec![n, d]);
    for v in t.data_mut() {
        *v = rng.sample::<f64, _>(StandardNormal);
    }
    t
}

/// The generation objective: CE of global-model outputs against targets
/// plus lambda_dis times the global/local disagreement. Both models frozen.
pub fn generation_loss(
    global: &ModelParams,
    local: &ModelParams,
    inputs: &Tensor,
    targets: &[usize],
    lambda_dis: f64,
) -> Result<f64> {
    let p_g = softmax(&forward(global, inputs)?)?;
    let mut loss = cross_entropy(&p_g, targets)?;
    if lambda_dis != 0.0 {
        let p_l = softmax(&forward(local, inputs)?)?;
        loss += lambda_dis * js_disagreement(&p_g, &p_l)?;
    }
    Ok(loss)
}

/// Runs the input-optimization loop and emits the generated dataset.
/// The global and local models are read-only throughout.
pub fn generate(
    global: &ModelParams,
    local: &ModelParams,
    client_histogram: &LabelHistogram,
    cfg: &GenConfig,
    seed: u64,
) -> Result<GeneratedDataset> {
    cfg.validate()?;
    let num_classes = global.output_dim();
    let strategy = match cfg.label_strategy {
        TargetLabelStrategy::Uniform => LabelStrategy::Uniform,
        TargetLabelStrategy::Complementary => {
            LabelStrategy::Complementary(complementary_distribution(client_histogram))
        }
    };
    let targets = allocate_target_labels(&strategy, num_classes, cfg.num_samples);
    let mut inputs = init_inputs(cfg.num_samples, global.input_dim(), mix_seed(&[seed, 0x6e]));

    for _ in 0..cfg.steps {
        let mut spec = LossSpec::new().with(1.0, LossTerm::CrossEntropy { labels: &targets });
        if cfg.lambda_dis != 0.0 {
            spec = spec.with(cfg.lambda_dis, LossTerm::JsDisagreement { other: local });
        }
        let (_, grads) = backward(global, &inputs, &spec, Wrt::Inputs)?;
        sgd_step_inputs(&mut inputs, &grads.inputs.expect("input grads"), cfg.lr_gen);
    }

    inputs.clamp01();
    let teacher_probs = softmax(&forward(global, &inputs)?)?;
    Ok(GeneratedDataset {
        inputs,
        targets,
        teacher_probs,
    })
}

/// Writes one binary PGM (P5, maxval 255) per generated sample.
pub fn dump_images(gen: &GeneratedDataset, side: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    let d = gen.inputs.cols();
    if side * side != d {
        return Err(Error::Config(format!(
            "side {side} squared does not match sample dim {d}"
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut paths = Vec::with_capacity(gen.len());
    for i in 0..gen.len() {
        let path = dir.join(format!("gen_{i}_label{}.pgm", gen.targets[i]));
        let mut bytes = format!("P5\n{side} {side}\n255\n").into_bytes();
        bytes.extend(
            gen.inputs
                .row(i)
                .iter()
                .map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8),
        );
        let mut f =
            fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        paths.push(path);
    }
    Ok(paths)
}
