//! Acceptance suite: one test per criterion, each printing a single
//! pass/fail line (visible with `cargo test -- --nocapture`).

use std::sync::OnceLock;
use std::time::Instant;

use fedcog::config::{parse_config_str, ExperimentConfig};
use fedcog::data::{
    label_histogram, partition, synth_blobs, LabeledDataset, PartitionKind, PartitionSpec,
};
use fedcog::experiment::{rounds_csv, run_experiment, RunResult};
use fedcog::fed::{aggregate, run_round, secagg_mask, secagg_sum, ClientUpdate, RoundConfig, SimState};
use fedcog::generation::{generate, init_inputs, GenConfig, TargetLabelStrategy};
use fedcog::gradcheck::run_suite;
use fedcog::metrics::{lemma1_check, theorem_bound, TheoremInputs};
use fedcog::nn::{forward, softmax, ModelParams};
use fedcog::trainers::{LocalRunConfig, TrainerKind};
use fedcog::util::mix_seed;

fn report(criterion: usize, ok: bool, what: &str) {
    println!(
        "criterion {criterion}: {} — {what}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {criterion} failed: {what}");
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_gradient_oracle_suite() {
    let start = Instant::now();
    let rep = run_suite(20, 1234).expect("gradcheck suite");
    let secs = start.elapsed().as_secs_f64();
    let ok = rep.passed() && secs < 30.0;
    report(
        1,
        ok,
        &format!(
            "analytic vs central-difference gradients over {} comparisons, \
             max rel err {:.2e} (< 1e-4), {:.1}s (< 30s)",
            rep.checked, rep.max_rel_err, secs
        ),
    );
}

// ---------------------------------------------------------------- 2

fn reduction_setting() -> (SimState, Vec<LabeledDataset>, RoundConfig) {
    let ds = synth_blobs(4, 30, 8, 0.3, 11);
    let spec = PartitionSpec {
        kind: PartitionKind::Iid,
        num_clients: 3,
        seed: 5,
    };
    let parts = partition(&ds, &spec).unwrap();
    let global = ModelParams::random_init(&[8, 10, 4], 21);
    let state = SimState::new(global, 3);
    let cfg = RoundConfig {
        method: TrainerKind::FedAvg,
        server_momentum: None,
        local: LocalRunConfig {
            tau: 6,
            lr: 0.05,
            batch_size: 8,
        },
        gen: GenConfig {
            num_samples: 8,
            steps: 0,
            lr_gen: 0.1,
            lambda_dis: 0.1,
            label_strategy: TargetLabelStrategy::Complementary,
        },
        generation_enabled: false,
        participation: 3,
        secagg: false,
        seed: 77,
    };
    (state, parts, cfg)
}

#[test]
fn criterion_2_reduction_identities() {
    let (mut base_state, parts, base_cfg) = reduction_setting();
    run_round(&mut base_state, &parts, &base_cfg).unwrap();

    let variants: Vec<(&str, TrainerKind, bool, usize)> = vec![
        ("FedProx(mu=0)", TrainerKind::FedProx { mu: 0.0 }, false, base_cfg.local.tau),
        (
            "FedCOG(lambda_kd=0, steps=0)",
            TrainerKind::FedCog {
                lambda_kd: 0.0,
                adaptive_weights: false,
            },
            true,
            base_cfg.local.tau,
        ),
        ("SCAFFOLD(zero variates, tau=1)", TrainerKind::Scaffold, false, 1),
    ];
    let mut ok = true;
    let mut detail = String::new();
    for (name, method, gen_on, tau) in variants {
        let (mut state, parts_v, mut cfg) = reduction_setting();
        cfg.method = method;
        cfg.generation_enabled = gen_on;
        cfg.local.tau = tau;
        run_round(&mut state, &parts_v, &cfg).unwrap();

        let (mut avg_state, parts_a, mut avg_cfg) = reduction_setting();
        avg_cfg.local.tau = tau;
        run_round(&mut avg_state, &parts_a, &avg_cfg).unwrap();

        let same = state.global == avg_state.global;
        ok &= same;
        if !same {
            detail.push_str(&format!(" {name} diverged;"));
        }
    }
    report(
        2,
        ok,
        &format!(
            "FedProx(mu=0), FedCOG(lambda_kd=0, steps=0), SCAFFOLD(zero variates, tau=1) \
             each bitwise-equal to FedAvg under shared seeds{detail}"
        ),
    );
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_3_secagg_transparency() {
    let mut max_err: f64 = 0.0;
    let mut masked_everywhere = true;
    for trial in 0..20u64 {
        let n = 2 + (trial % 4) as usize;
        let updates: Vec<ClientUpdate> = (0..n)
            .map(|i| ClientUpdate {
                client_id: i,
                params: ModelParams::random_init(&[5, 7, 3], mix_seed(&[trial, i as u64])),
                num_samples: 10 + i * 3,
                delta_c: None,
            })
            .collect();
        let plain = aggregate(&updates).unwrap();
        let outcome = secagg_mask(&updates, mix_seed(&[trial, 0x99])).unwrap();
        let ids: Vec<usize> = updates.iter().map(|u| u.client_id).collect();
        let summed = secagg_sum(&outcome.updates, &ids).unwrap();
        for (a, b) in summed.flat_iter().zip(plain.flat_iter()) {
            max_err = max_err.max((a - b).abs());
        }
        // With >= 2 participants every surfaced per-client vector must be
        // masked: the only accessor on a MaskedUpdate returns masked values,
        // and those must not coincide with any raw update.
        for (mu, u) in outcome.updates.iter().zip(&updates) {
            let identical = mu
                .masked_params()
                .flat_iter()
                .zip(u.params.flat_iter())
                .all(|(a, b)| a == b);
            masked_everywhere &= !identical;
        }
    }
    let ok = max_err < 1e-9 && masked_everywhere;
    report(
        3,
        ok,
        &format!(
            "20 randomized rounds: secagg_sum vs plain aggregate max abs err {max_err:.2e} \
             (< 1e-9); MaskedUpdate exposes only masked vectors (private field + accessor), \
             none equal to a raw update"
        ),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_lemma1_property() {
    let mut holds_all = true;
    let mut worst_gap: f64 = f64::NEG_INFINITY;
    for trial in 0..50u64 {
        let dims = [12, 9, 5];
        let model = ModelParams::random_init(&dims, mix_seed(&[trial, 1]));
        let old_model = ModelParams::random_init(&dims, mix_seed(&[trial, 2]));
        let local = ModelParams::random_init(&dims, mix_seed(&[trial, 3]));
        let eval_ds = synth_blobs(5, 8, 12, 0.3, mix_seed(&[trial, 4]));
        let hist = label_histogram(&eval_ds);
        let gcfg = GenConfig {
            num_samples: 16,
            steps: 4,
            lr_gen: 0.1,
            lambda_dis: 0.1,
            label_strategy: TargetLabelStrategy::Complementary,
        };
        let gen_new = generate(&model, &local, &hist, &gcfg, mix_seed(&[trial, 5])).unwrap();
        let gen_old = generate(&old_model, &local, &hist, &gcfg, mix_seed(&[trial, 6])).unwrap();
        let out = lemma1_check(&model, &gen_new, &gen_old, &eval_ds).unwrap();
        holds_all &= out.holds;
        worst_gap = worst_gap.max(out.lhs - out.rhs);
    }
    report(
        4,
        holds_all,
        &format!(
            "non-increasing global loss identity holds on 50 randomized trials, \
             worst lhs-rhs gap {worst_gap:.2e} (tolerance 1e-9)"
        ),
    );
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_5_theorem_calculator() {
    // Hand case with sigma = kappa = 0: only the first term survives,
    // 4 * Phi / (tau * eta * T) = 4 * 0.5 / (1 * 1 * 1) = 2.
    let hand = theorem_bound(&TheoremInputs {
        phi0_minus_inf: 0.5,
        l: 0.5,
        sigma: 0.0,
        kappa: 0.0,
        beta_sq: 1.0,
        tau: 1,
        eta: 1.0,
        t: 1,
        p: vec![1.0],
    })
    .unwrap();
    let hand_ok = (hand.total - 2.0).abs() < 1e-12;

    // Corollary scaling under eta = 1/sqrt(tau T): terms 1-2 are
    // O(1/sqrt(tau T)) and terms 3-4 are O(tau/T); quadrupling T must halve
    // the former and quarter the latter, exactly.
    let tau = 4usize;
    let mk = |t: usize| {
        theorem_bound(&TheoremInputs {
            phi0_minus_inf: 1.3,
            l: 0.01,
            sigma: 0.7,
            kappa: 0.9,
            beta_sq: 1.5,
            tau,
            eta: 1.0 / ((tau * t) as f64).sqrt(),
            t,
            p: vec![0.4, 0.35, 0.25],
        })
        .unwrap()
    };
    let b1 = mk(10_000);
    let b4 = mk(40_000);
    let mut scale_ok = true;
    for i in 0..2 {
        scale_ok &= (b1.terms[i] / b4.terms[i] - 2.0).abs() < 1e-9;
    }
    for i in 2..4 {
        scale_ok &= (b1.terms[i] / b4.terms[i] - 4.0).abs() < 1e-9;
    }
    let ok = hand_ok && scale_ok;
    report(
        5,
        ok,
        &format!(
            "hand case total = {:.12} (expect 2.0); under eta = 1/sqrt(tau T) the \
             1/sqrt(tau T) terms halve and the tau/T terms quarter when T quadruples \
             (ratios exact to 1e-9)",
            hand.total
        ),
    );
}

// ---------------------------------------------------------------- 6 & 7 (shared heavy run)

const HEAVY_BASE: &str = r#"
rounds = 30
clients = 10
participation = 10
seeds = [1, 2, 3]

[dataset]
kind = "synth"
num_classes = 10
per_class = 100
test_per_class = 20
dim = 784
spread = 1.0
data_seed = 7

[partition]
kind = "niid2"
labels_per_client = 2

[local]
tau = 200
lr = 0.01
batch_size = 32

[method_params]
adaptive_kd = true

[gen]
num_samples = 128
steps = 50
"#;

fn heavy_cfg(method: &str) -> ExperimentConfig {
    let extra = if method == "fedcog" {
        "method = \"fedcog\"\nfedcog_start_round = 20\n"
    } else {
        "method = \"fedavg\"\n"
    };
    parse_config_str(&format!("{extra}{HEAVY_BASE}")).unwrap()
}

struct HeavyOutcome {
    fedavg: RunResult,
    fedcog: RunResult,
}

fn heavy() -> &'static HeavyOutcome {
    static CELL: OnceLock<HeavyOutcome> = OnceLock::new();
    CELL.get_or_init(|| HeavyOutcome {
        fedavg: run_experiment(&heavy_cfg("fedavg")).expect("fedavg run"),
        fedcog: run_experiment(&heavy_cfg("fedcog")).expect("fedcog run"),
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn criterion_6_directional_table1() {
    let h = heavy();
    let avg: Vec<f64> = h.fedavg.seed_runs.iter().map(|s| s.final_global_acc).collect();
    let cog: Vec<f64> = h.fedcog.seed_runs.iter().map(|s| s.final_global_acc).collect();
    let gap = 100.0 * (mean(&cog) - mean(&avg));
    let ok = gap >= 1.0;
    report(
        6,
        ok,
        &format!(
            "synthetic fallback, MLP 784-120-84-10, NIID-2, 30 rounds (20 warm + 10 method), \
             3 seeds: mean final global acc {:.2}% (consensus generation) vs {:.2}% (FedAvg), \
             gap {gap:.2} points (need >= 1.0)",
            100.0 * mean(&cog),
            100.0 * mean(&avg)
        ),
    );
}

#[test]
fn criterion_7_model_difference_direction() {
    let h = heavy();
    let final_diff = |r: &RunResult| {
        let per_seed: Vec<f64> = r
            .seed_runs
            .iter()
            .map(|s| {
                let last = s
                    .records
                    .iter()
                    .rev()
                    .find(|rec| !rec.model_diff_l2.is_empty())
                    .expect("a measured round");
                mean(&last.model_diff_l2)
            })
            .collect();
        mean(&per_seed)
    };
    let d_cog = final_diff(&h.fedcog);
    let d_avg = final_diff(&h.fedavg);
    let ok = d_cog <= d_avg;
    report(
        7,
        ok,
        &format!(
            "mean local-vs-global l2 model difference at the final round, 3 seeds: \
             {d_cog:.3} (consensus generation) <= {d_avg:.3} (FedAvg)"
        ),
    );
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_8_generation_sanity() {
    let mut improved = 0usize;
    let mut frozen_exact = true;
    for trial in 0..20u64 {
        let dims = [20, 16, 6];
        let global = ModelParams::random_init(&dims, mix_seed(&[trial, 0x81]));
        let local = ModelParams::random_init(&dims, mix_seed(&[trial, 0x82]));
        let ds = synth_blobs(6, 10, 20, 0.3, mix_seed(&[trial, 0x83]));
        let hist = label_histogram(&ds);
        let mk = |steps: usize| GenConfig {
            num_samples: 32,
            steps,
            lr_gen: 0.1,
            lambda_dis: 0.1,
            label_strategy: TargetLabelStrategy::Complementary,
        };
        let seed = mix_seed(&[trial, 0x84]);
        let g0 = generate(&global, &local, &hist, &mk(0), seed).unwrap();
        let g100 = generate(&global, &local, &hist, &mk(100), seed).unwrap();

        let mut init = init_inputs(32, 20, mix_seed(&[seed, 0x6e]));
        init.clamp01();
        frozen_exact &= g0.inputs.data() == init.data();

        let target_prob = |g: &fedcog::generation::GeneratedDataset| {
            let probs = softmax(&forward(&global, &g.inputs).unwrap()).unwrap();
            let s: f64 = g
                .targets
                .iter()
                .enumerate()
                .map(|(i, &y)| probs.row(i)[y])
                .sum();
            s / g.targets.len() as f64
        };
        if target_prob(&g100) > target_prob(&g0) {
            improved += 1;
        }
    }
    let ok = improved >= 19 && frozen_exact;
    report(
        8,
        ok,
        &format!(
            "steps=100 raised mean target-label probability over steps=0 in {improved}/20 \
             trials (need >= 19); steps=0 equals clamped initialization exactly: {frozen_exact}"
        ),
    );
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_9_partition_statistics() {
    let ds = synth_blobs(10, 120, 12, 0.3, 31);
    let global_prop = 0.1;

    // NIID-1 with a huge concentration parameter approaches the global mix.
    let spec1 = PartitionSpec {
        kind: PartitionKind::Dirichlet { beta: 1e6 },
        num_clients: 8,
        seed: 9,
    };
    let parts1 = partition(&ds, &spec1).unwrap();
    let mut max_dev: f64 = 0.0;
    for p in &parts1 {
        let h = label_histogram(p);
        for &c in &h.counts {
            max_dev = max_dev.max((c as f64 / p.len() as f64 - global_prop).abs());
        }
    }

    // NIID-2 gives exactly labels_per_client distinct labels.
    let spec2 = PartitionSpec {
        kind: PartitionKind::LabelShards { labels_per_client: 2 },
        num_clients: 10,
        seed: 9,
    };
    let parts2 = partition(&ds, &spec2).unwrap();
    let shards_ok = parts2.iter().all(|p| {
        label_histogram(p).counts.iter().filter(|&&c| c > 0).count() == 2
    });

    // Conservation across a sweep of kinds and seeds.
    let mut conserved = true;
    for seed in 0..10u64 {
        for kind in [
            PartitionKind::Iid,
            PartitionKind::Dirichlet { beta: 0.1 },
            PartitionKind::LabelShards { labels_per_client: 3 },
        ] {
            let spec = PartitionSpec {
                kind,
                num_clients: 6,
                seed,
            };
            let parts = partition(&ds, &spec).unwrap();
            conserved &= parts.iter().map(|p| p.len()).sum::<usize>() == ds.len();
        }
    }

    let ok = max_dev < 0.05 && shards_ok && conserved;
    report(
        9,
        ok,
        &format!(
            "NIID-1 beta=1e6 max per-client proportion deviation {max_dev:.4} (< 0.05); \
             NIID-2 exactly 2 distinct labels per client: {shards_ok}; \
             sample conservation over 30 partitions: {conserved}"
        ),
    );
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_determinism() {
    let cfg = parse_config_str(
        r#"
method = "fedcog"
rounds = 4
clients = 4
participation = 3
fedcog_start_round = 2
seeds = [42]
secagg = true

[dataset]
kind = "synth"
num_classes = 5
per_class = 40
test_per_class = 10
dim = 16
spread = 0.4
data_seed = 3

[partition]
kind = "niid1"
beta = 0.1

[local]
tau = 20
lr = 0.02
batch_size = 16

[gen]
num_samples = 20
steps = 10
"#,
    )
    .unwrap();
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    let csv_a = rounds_csv(&a.seed_runs[0].records);
    let csv_b = rounds_csv(&b.seed_runs[0].records);
    // gen_seconds / train_seconds hold wall-clock measurements, so the
    // byte-identity contract covers every other column.
    let strip = |csv: &str| -> Vec<String> {
        csv.lines()
            .map(|l| {
                let cols: Vec<&str> = l.split(',').collect();
                cols[..cols.len() - 2].join(",")
            })
            .collect()
    };
    let ok = strip(&csv_a) == strip(&csv_b);
    report(
        10,
        ok,
        "re-run with identical config and seed reproduces rounds.csv byte-for-byte \
         (timing columns excluded: they record wall-clock seconds)",
    );
}
