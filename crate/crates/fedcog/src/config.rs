//! Experiment configuration: TOML with flat sections, strict about unknown
//! keys, with defaults matching the reference training setup (70 rounds,
//! 10 clients, tau = 400, lr = 0.01, Dirichlet beta = 0.1, lambda_dis = 0.1,
//! lambda_kd = 0.01, 256 generated samples).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{PartitionKind, PartitionSpec};
use crate::error::{Error, Result};
use crate::generation::{GenConfig, TargetLabelStrategy};
use crate::trainers::{LocalRunConfig, TrainerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// "synth" or "idx".
    pub kind: String,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    pub num_classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub data_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: "synth".into(),
            train_images: String::new(),
            train_labels: String::new(),
            test_images: String::new(),
            test_labels: String::new(),
            num_classes: 10,
            per_class: 200,
            test_per_class: 50,
            dim: 784,
            spread: 0.25,
            data_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    /// "iid", "niid1" (Dirichlet) or "niid2" (label shards).
    pub kind: String,
    pub beta: f64,
    pub labels_per_client: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            kind: "niid1".into(),
            beta: 0.1,
            labels_per_client: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    pub mu: f64,
    pub lambda_kd: f64,
    pub adaptive_kd: bool,
    pub server_momentum: f64,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            mu: 0.01,
            lambda_kd: 0.01,
            adaptive_kd: false,
            server_momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalConfig {
    pub tau: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for LocalConfig {
    fn default() -> Self {
        LocalConfig {
            tau: 400,
            lr: 0.01,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSection {
    pub num_samples: usize,
    pub steps: usize,
    pub lr_gen: f64,
    pub lambda_dis: f64,
    /// "uniform" or "complementary".
    pub label_strategy: String,
}

impl Default for GenSection {
    fn default() -> Self {
        GenSection {
            num_samples: 256,
            steps: 100,
            lr_gen: 0.1,
            lambda_dis: 0.1,
            label_strategy: "complementary".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// "fedavg", "fedprox", "scaffold", "fedavgm", "fedcog".
    pub method: String,
    pub rounds: usize,
    pub clients: usize,
    pub participation: usize,
    /// First round (0-based) at which FedCOG generation turns on.
    pub fedcog_start_round: usize,
    pub seeds: Vec<u64>,
    pub secagg: bool,
    pub personal_fraction: f64,
    pub output_dir: String,
    pub dump_generated_images: bool,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub method_params: MethodConfig,
    pub local: LocalConfig,
    pub gen: GenSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: "fedcog".into(),
            rounds: 70,
            clients: 10,
            participation: 10,
            fedcog_start_round: 0,
            seeds: vec![1],
            secagg: false,
            personal_fraction: 0.2,
            output_dir: "out".into(),
            dump_generated_images: false,
            dataset: DatasetConfig::default(),
            partition: PartitionConfig::default(),
            method_params: MethodConfig::default(),
            local: LocalConfig::default(),
            gen: GenSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.clients == 0 {
            return Err(Error::Config("clients must be >= 1".into()));
        }
        if self.participation == 0 || self.participation > self.clients {
            return Err(Error::Config(format!(
                "participation {} out of range 1..={}",
                self.participation, self.clients
            )));
        }
        if self.fedcog_start_round > self.rounds {
            return Err(Error::Config(format!(
                "fedcog_start_round {} exceeds rounds {}",
                self.fedcog_start_round, self.rounds
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("need at least one seed".into()));
        }
        if !(0.0..1.0).contains(&self.personal_fraction) || self.personal_fraction == 0.0 {
            return Err(Error::Config("personal_fraction must be in (0, 1)".into()));
        }
        self.trainer_kind()?;
        self.partition_kind()?;
        self.gen_config()?;
        if self.local.lr <= 0.0 || self.local.batch_size == 0 {
            return Err(Error::Config("local lr must be > 0 and batch_size >= 1".into()));
        }
        match self.dataset.kind.as_str() {
            "synth" => {
                if self.dataset.num_classes == 0
                    || self.dataset.per_class == 0
                    || self.dataset.dim == 0
                {
                    return Err(Error::Config("synth dataset dims must be positive".into()));
                }
            }
            "idx" => {
                if self.dataset.train_images.is_empty() || self.dataset.train_labels.is_empty() {
                    return Err(Error::Config("idx dataset needs train file paths".into()));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "dataset.kind '{other}' is not one of synth, idx"
                )))
            }
        }
        Ok(())
    }

    pub fn trainer_kind(&self) -> Result<TrainerKind> {
        match self.method.as_str() {
            "fedavg" | "fedavgm" => Ok(TrainerKind::FedAvg),
            "fedprox" => Ok(TrainerKind::FedProx {
                mu: self.method_params.mu,
            }),
            "scaffold" => Ok(TrainerKind::Scaffold),
            "fedcog" => Ok(TrainerKind::FedCog {
                lambda_kd: self.method_params.lambda_kd,
                adaptive_weights: self.method_params.adaptive_kd,
            }),
            other => Err(Error::Config(format!(
                "method '{other}' is not one of fedavg, fedavgm, fedprox, scaffold, fedcog"
            ))),
        }
    }

    pub fn server_momentum(&self) -> Option<f64> {
        (self.method == "fedavgm").then_some(self.method_params.server_momentum)
    }

    pub fn partition_kind(&self) -> Result<PartitionKind> {
        match self.partition.kind.as_str() {
            "iid" => Ok(PartitionKind::Iid),
            "niid1" => Ok(PartitionKind::Dirichlet {
                beta: self.partition.beta,
            }),
            "niid2" => Ok(PartitionKind::LabelShards {
                labels_per_client: self.partition.labels_per_client,
            }),
            other => Err(Error::Config(format!(
                "partition.kind '{other}' is not one of iid, niid1, niid2"
            ))),
        }
    }

    pub fn partition_spec(&self, seed: u64) -> Result<PartitionSpec> {
        Ok(PartitionSpec {
            kind: self.partition_kind()?,
            num_clients: self.clients,
            seed,
        })
    }

    pub fn gen_config(&self) -> Result<GenConfig> {
        let label_strategy = match self.gen.label_strategy.as_str() {
            "uniform" => TargetLabelStrategy::Uniform,
            "complementary" => TargetLabelStrategy::Complementary,
            other => {
                return Err(Error::Config(format!(
                    "gen.label_strategy '{other}' is not one of uniform, complementary"
                )))
            }
        };
        let cfg = GenConfig {
            num_samples: self.gen.num_samples,
            steps: self.gen.steps,
            lr_gen: self.gen.lr_gen,
            lambda_dis: self.gen.lambda_dis,
            label_strategy,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn local_run_config(&self) -> LocalRunConfig {
        LocalRunConfig {
            tau: self.local.tau,
            lr: self.local.lr,
            batch_size: self.local.batch_size,
        }
    }
}

/// Parses a TOML config file. Unknown keys are errors; absent keys take the
/// defaults above.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn config_to_toml(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))
}
