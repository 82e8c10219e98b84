//! Experiment driver: builds datasets, runs the round loop per seed, and
//! persists rounds.csv plus a summary.json with the echoed config.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::{self, LabeledDataset};
use crate::error::{Error, Result};
use crate::fed::{run_round, RoundConfig, RoundRecord, SimState};
use crate::metrics::{evaluate_accuracy, personalized_split};
use crate::nn::ModelParams;
use crate::util::mix_seed;

pub const OUTPUT_DIR_ENV: &str = "FEDCOG_OUTPUT_DIR";

const HIDDEN_DIMS: [usize; 2] = [120, 84];

/// One completed seed repetition.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    pub final_global_acc: f64,
    pub best_global_acc: f64,
    pub last5_mean_acc: f64,
    pub final_global: ModelParams,
}

/// Full experiment outcome over all configured seeds.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub seed_runs: Vec<SeedRun>,
}

/// Train/test pair. For synth data both halves share class centers so the
/// test set actually measures the learned decision boundaries.
pub fn build_datasets(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    match cfg.dataset.kind.as_str() {
        "idx" => {
            let train = data::load_idx(
                Path::new(&cfg.dataset.train_images),
                Path::new(&cfg.dataset.train_labels),
            )?;
            let test = data::load_idx(
                Path::new(&cfg.dataset.test_images),
                Path::new(&cfg.dataset.test_labels),
            )?;
            if train.dim() != test.dim() {
                return Err(Error::Config("train/test feature dims differ".into()));
            }
            Ok((train, test))
        }
        "synth" => {
            let d = &cfg.dataset;
            let total = d.per_class + d.test_per_class;
            let all = data::synth_blobs(d.num_classes, total, d.dim, d.spread, d.data_seed);
            // synth_blobs emits samples class-major, so a fixed index split
            // keeps the class balance exact on both sides.
            let mut train_idx = Vec::with_capacity(d.num_classes * d.per_class);
            let mut test_idx = Vec::with_capacity(d.num_classes * d.test_per_class);
            for c in 0..d.num_classes {
                let base = c * total;
                train_idx.extend(base..base + d.per_class);
                test_idx.extend(base + d.per_class..base + total);
            }
            Ok((all.subset(&train_idx), all.subset(&test_idx)))
        }
        other => Err(Error::Config(format!("dataset.kind '{other}' unsupported"))),
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Runs one seed repetition: partition, personalization splits, T rounds.
pub fn run_seed(
    cfg: &ExperimentConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
    seed: u64,
) -> Result<SeedRun> {
    let spec = cfg.partition_spec(mix_seed(&[seed, 0x11]))?;
    let client_full = data::partition(train, &spec)?;
    let mut client_train = Vec::with_capacity(client_full.len());
    let mut client_personal = Vec::with_capacity(client_full.len());
    for (id, ds) in client_full.iter().enumerate() {
        if ds.is_empty() {
            client_train.push(ds.clone());
            client_personal.push(ds.clone());
            continue;
        }
        let (tr, te, _notes) =
            personalized_split(ds, cfg.personal_fraction, mix_seed(&[seed, 0x12, id as u64]))?;
        client_train.push(tr);
        client_personal.push(te);
    }

    let mut dims = vec![train.dim()];
    dims.extend_from_slice(&HIDDEN_DIMS);
    dims.push(train.num_classes);
    let global = ModelParams::random_init(&dims, mix_seed(&[seed, 0x10]));
    let mut state = SimState::new(global, cfg.clients);

    let method = cfg.trainer_kind()?;
    let is_fedcog = cfg.method == "fedcog";
    let mut records = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let rc = RoundConfig {
            method: method.clone(),
            server_momentum: cfg.server_momentum(),
            local: cfg.local_run_config(),
            gen: cfg.gen_config()?,
            generation_enabled: is_fedcog && t >= cfg.fedcog_start_round,
            participation: cfg.participation,
            secagg: cfg.secagg,
            seed,
        };
        let mut record = run_round(&mut state, &client_train, &rc)?;
        record.global_acc = evaluate_accuracy(&state.global, test)?;
        for &id in &record.sampled {
            let local = state.clients[id]
                .last_local
                .as_ref()
                .unwrap_or(&state.global);
            record
                .per_client_general_acc
                .push(evaluate_accuracy(local, test)?);
            let personal = &client_personal[id];
            let acc = if personal.is_empty() {
                record.global_acc
            } else {
                evaluate_accuracy(local, personal)?
            };
            record.per_client_personal_acc.push(acc);
        }
        records.push(record);
    }

    let accs: Vec<f64> = records.iter().map(|r| r.global_acc).collect();
    let final_global_acc = *accs.last().unwrap_or(&0.0);
    let best_global_acc = accs.iter().copied().fold(0.0, f64::max);
    let tail = &accs[accs.len().saturating_sub(5)..];
    Ok(SeedRun {
        seed,
        records,
        final_global_acc,
        best_global_acc,
        last5_mean_acc: mean(tail),
        final_global: state.global,
    })
}

/// Runs every configured seed sequentially.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let (train, test) = build_datasets(cfg)?;
    let mut seed_runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        seed_runs.push(run_seed(cfg, &train, &test, seed)?);
    }
    Ok(RunResult {
        config: cfg.clone(),
        seed_runs,
    })
}

/// Formats with 6 significant digits and a '.' decimal separator.
pub fn fmt_sig(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() {
            "NaN".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    if v == 0.0 {
        return "0.00000".into();
    }
    let exp = v.abs().log10().floor() as i32;
    let decimals = (5 - exp).max(0) as usize;
    format!("{:.*}", decimals, v)
}

pub const CSV_HEADER: &str = "round,global_acc,mean_local_general_acc,mean_local_personal_acc,mean_model_diff,mean_train_loss,gen_seconds,train_seconds";

pub fn rounds_csv(records: &[RoundRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let cols = [
            r.global_acc,
            mean(&r.per_client_general_acc),
            mean(&r.per_client_personal_acc),
            mean(&r.model_diff_l2),
            mean(&r.mean_train_loss),
            r.gen_seconds.iter().sum::<f64>(),
            r.train_seconds.iter().sum::<f64>(),
        ];
        out.push_str(&r.round.to_string());
        for c in cols {
            out.push(',');
            out.push_str(&fmt_sig(c));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Serialize)]
struct SeedSummary {
    seed: u64,
    rounds: usize,
    final_global_acc: f64,
    best_global_acc: f64,
    last5_mean_acc: f64,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    config: &'a ExperimentConfig,
    seeds: Vec<SeedSummary>,
    mean_final_global_acc: f64,
    std_final_global_acc: f64,
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    var.sqrt()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Persists one rounds.csv per seed plus summary.json. Returns the paths
/// written, summary first.
pub fn write_results(result: &RunResult, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut paths = Vec::new();
    let finals: Vec<f64> = result.seed_runs.iter().map(|s| s.final_global_acc).collect();
    let summary = Summary {
        config: &result.config,
        seeds: result
            .seed_runs
            .iter()
            .map(|s| SeedSummary {
                seed: s.seed,
                rounds: s.records.len(),
                final_global_acc: s.final_global_acc,
                best_global_acc: s.best_global_acc,
                last5_mean_acc: s.last5_mean_acc,
            })
            .collect(),
        mean_final_global_acc: mean(&finals),
        std_final_global_acc: sample_std(&finals),
    };
    let summary_path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Format(e.to_string()))?;
    write_file(&summary_path, &text)?;
    paths.push(summary_path);
    for s in &result.seed_runs {
        let seed_dir = dir.join(format!("seed_{}", s.seed));
        std::fs::create_dir_all(&seed_dir)
            .map_err(|e| Error::io(seed_dir.display().to_string(), e))?;
        let csv_path = seed_dir.join("rounds.csv");
        write_file(&csv_path, &rounds_csv(&s.records))?;
        paths.push(csv_path);
    }
    Ok(paths)
}

/// Output dir from the config, overridable via FEDCOG_OUTPUT_DIR.
pub fn resolve_output_dir(cfg: &ExperimentConfig) -> PathBuf {
    match std::env::var(OUTPUT_DIR_ENV) {
        Ok(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(&cfg.output_dir),
    }
}
