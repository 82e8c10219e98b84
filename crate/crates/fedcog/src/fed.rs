//! Round orchestration: client sampling, local training fan-out, weighted
//! aggregation, optional server momentum, and a simulated secure-aggregation
//! path built on antisymmetric pairwise masks.
//!
//! When masking is on, server-side aggregation only ever sees
//! `MaskedUpdate` values; raw client parameters stay on the client side of
//! the simulation (the per-client state slots).

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::data::{label_histogram, LabeledDataset};
use crate::error::{Error, Result};
use crate::generation::{generate, GenConfig};
use crate::nn::ModelParams;
use crate::trainers::{
    adaptive_kd_coefficients, local_train_fedavg, local_train_fedcog, local_train_fedprox,
    local_train_scaffold, LocalRunConfig, TrainerKind,
};
use crate::util::mix_seed;

#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ModelParams,
    pub num_samples: usize,
    pub delta_c: Option<ModelParams>,
}

/// A client update after pairwise masking. The raw parameters are not
/// recoverable from a single masked update; only the sum over all round
/// participants is meaningful.
#[derive(Debug, Clone)]
pub struct MaskedUpdate {
    pub client_id: usize,
    masked_params: ModelParams,
}

impl MaskedUpdate {
    pub fn masked_params(&self) -> &ModelParams {
        &self.masked_params
    }
}

/// Weighted elementwise mean with p_k = n_k / sum(n).
/// Identical updates short-circuit so that aggregating N copies of theta
/// returns theta exactly.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<ModelParams> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Protocol("aggregate on empty update list".into()))?;
    if updates.iter().skip(1).all(|u| u.params == first.params) {
        return Ok(first.params.clone());
    }
    let total: usize = updates.iter().map(|u| u.num_samples).sum();
    if total == 0 {
        return Err(Error::Protocol("aggregate with zero total samples".into()));
    }
    let mut acc = first.params.zeros_like();
    for u in updates {
        if !u.params.same_shape(&acc) {
            return Err(Error::Shape("update shape mismatch in aggregate".into()));
        }
        if u.num_samples == 0 {
            return Err(Error::Protocol(format!(
                "client {} reports zero samples",
                u.client_id
            )));
        }
        acc.axpy(u.num_samples as f64 / total as f64, &u.params);
    }
    Ok(acc)
}

/// FedAvgM server update: v <- momentum * v + (theta - aggregate);
/// theta' = theta - v.
pub fn apply_server_momentum(
    global: &ModelParams,
    momentum_buf: &mut Option<ModelParams>,
    aggregated: ModelParams,
    momentum: f64,
) -> Result<ModelParams> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!("momentum {momentum} not in [0, 1)")));
    }
    if momentum == 0.0 {
        return Ok(aggregated);
    }
    let mut pseudo_grad = global.clone();
    pseudo_grad.axpy(-1.0, &aggregated);
    let v = momentum_buf.get_or_insert_with(|| global.zeros_like());
    v.scale(momentum);
    v.axpy(1.0, &pseudo_grad);
    let mut next = global.clone();
    next.axpy(-1.0, v);
    Ok(next)
}

/// Uniform sampling without replacement, deterministic per (seed, round).
pub fn sample_clients(k: usize, count: usize, round: usize, seed: u64) -> Result<Vec<usize>> {
    if count == 0 || count > k {
        return Err(Error::Config(format!(
            "cannot sample {count} of {k} clients"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(&[seed, round as u64, 0x5c]));
    let mut ids: Vec<usize> = (0..k).collect();
    // Partial Fisher-Yates.
    for i in 0..count {
        let j = rng.gen_range(i..k);
        ids.swap(i, j);
    }
    let mut chosen = ids[..count].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

pub struct MaskingOutcome {
    pub updates: Vec<MaskedUpdate>,
    pub warning: Option<String>,
}

/// Pre-scales each update by its weight p_k and adds antisymmetric pairwise
/// masks drawn per ordered client pair from (round_seed, i, j). Summing all
/// masked updates cancels every mask.
pub fn secagg_mask(updates: &[ClientUpdate], round_seed: u64) -> Result<MaskingOutcome> {
    if updates.is_empty() {
        return Err(Error::Protocol("secagg_mask on empty update list".into()));
    }
    let total: usize = updates.iter().map(|u| u.num_samples).sum();
    if total == 0 {
        return Err(Error::Protocol("secagg_mask with zero total samples".into()));
    }
    let mut masked: Vec<MaskedUpdate> = updates
        .iter()
        .map(|u| {
            let mut p = u.params.clone();
            p.scale(u.num_samples as f64 / total as f64);
            MaskedUpdate {
                client_id: u.client_id,
                masked_params: p,
            }
        })
        .collect();
    if updates.len() == 1 {
        return Ok(MaskingOutcome {
            updates: masked,
            warning: Some("secagg requested with a single participant; masking skipped".into()),
        });
    }
    for i in 0..updates.len() {
        for j in (i + 1)..updates.len() {
            let (lo, hi) = (updates[i].client_id as u64, updates[j].client_id as u64);
            let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(&[round_seed, lo, hi, 0xab]));
            let (left, right) = masked.split_at_mut(j);
            let a = &mut left[i].masked_params;
            let b = &mut right[0].masked_params;
            for (va, vb) in a.flat_iter_mut().zip(b.flat_iter_mut()) {
                let m = rng.gen_range(-1.0..1.0);
                *va += m;
                *vb -= m;
            }
        }
    }
    Ok(MaskingOutcome {
        updates: masked,
        warning: None,
    })
}

/// Server-side summation of masked updates. All round participants must be
/// present; with the pairwise masks cancelling, the result equals the
/// weighted aggregate of the raw updates.
pub fn secagg_sum(masked: &[MaskedUpdate], expected_participants: &[usize]) -> Result<ModelParams> {
    if masked.is_empty() {
        return Err(Error::Protocol("secagg_sum on empty list".into()));
    }
    let mut present: Vec<usize> = masked.iter().map(|m| m.client_id).collect();
    present.sort_unstable();
    let mut expected = expected_participants.to_vec();
    expected.sort_unstable();
    if present != expected {
        return Err(Error::Protocol(format!(
            "secagg round incomplete: have {present:?}, expected {expected:?}"
        )));
    }
    let mut acc = masked[0].masked_params.zeros_like();
    for m in masked {
        acc.axpy(1.0, &m.masked_params);
    }
    Ok(acc)
}

/// Federated method selector for a round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    pub method: TrainerKind,
    /// FedAvgM server momentum; None disables it.
    pub server_momentum: Option<f64>,
    pub local: LocalRunConfig,
    pub gen: GenConfig,
    /// Whether FedCOG generation is active this round (warm-start gate).
    pub generation_enabled: bool,
    /// Clients sampled per round.
    pub participation: usize,
    pub secagg: bool,
    pub seed: u64,
}

/// Per-client persistent simulation state (client-side memory).
#[derive(Debug, Clone)]
pub struct ClientSlot {
    /// Most recent local model, used as the generation counterpart and for
    /// post-round diagnostics.
    pub last_local: Option<ModelParams>,
    c_k: ModelParams,
}

/// Global state owned by the orchestrator.
#[derive(Debug, Clone)]
pub struct SimState {
    pub round: usize,
    pub global: ModelParams,
    momentum_buf: Option<ModelParams>,
    c_global: ModelParams,
    pub clients: Vec<ClientSlot>,
}

impl SimState {
    pub fn new(global: ModelParams, num_clients: usize) -> Self {
        let c = global.zeros_like();
        SimState {
            round: 0,
            global: global.clone(),
            momentum_buf: None,
            c_global: c.clone(),
            clients: vec![
                ClientSlot {
                    last_local: None,
                    c_k: c,
                };
                num_clients
            ],
        }
    }
}

/// Per-round metrics. Accuracy fields are filled by the experiment layer,
/// which owns the test sets.
#[derive(Debug, Clone, Default)]
pub struct RoundRecord {
    pub round: usize,
    pub sampled: Vec<usize>,
    pub global_acc: f64,
    pub per_client_general_acc: Vec<f64>,
    pub per_client_personal_acc: Vec<f64>,
    pub model_diff_l2: Vec<f64>,
    pub mean_train_loss: Vec<f64>,
    pub gen_seconds: Vec<f64>,
    pub train_seconds: Vec<f64>,
    pub warnings: Vec<String>,
}

struct ClientResult {
    update: ClientUpdate,
    new_c_k: Option<ModelParams>,
    mean_loss: f64,
    gen_seconds: f64,
    train_seconds: f64,
}

/// Executes one federated round: sample, per-client (generation +) local
/// training, masked or plain aggregation, state bookkeeping.
pub fn run_round(
    state: &mut SimState,
    datasets: &[LabeledDataset],
    cfg: &RoundConfig,
) -> Result<RoundRecord> {
    let k = datasets.len();
    if k != state.clients.len() {
        return Err(Error::Config("dataset count does not match client count".into()));
    }
    let mut record = RoundRecord {
        round: state.round,
        ..Default::default()
    };
    let sampled = sample_clients(k, cfg.participation, state.round, cfg.seed)?;
    let active: Vec<usize> = sampled
        .iter()
        .copied()
        .filter(|&id| {
            if datasets[id].is_empty() {
                record
                    .warnings
                    .push(format!("client {id} has no data; skipped this round"));
                false
            } else {
                true
            }
        })
        .collect();
    record.sampled = active.clone();
    if active.is_empty() {
        state.round += 1;
        record.warnings.push("no trainable client this round".into());
        return Ok(record);
    }

    let round = state.round;
    let global = &state.global;
    let c_global = &state.c_global;
    let clients = &state.clients;
    let results: Vec<Result<ClientResult>> = active
        .par_iter()
        .map(|&id| {
            let ds = &datasets[id];
            let seed = mix_seed(&[cfg.seed, round as u64, id as u64, 0x7d]);
            let mut gen_seconds = 0.0;
            let train_start;
            let outcome: ClientResult = match &cfg.method {
                TrainerKind::FedAvg => {
                    train_start = Instant::now();
                    let out = local_train_fedavg(global, ds, &cfg.local, seed)?;
                    ClientResult {
                        update: ClientUpdate {
                            client_id: id,
                            params: out.model,
                            num_samples: ds.len(),
                            delta_c: None,
                        },
                        new_c_k: None,
                        mean_loss: out.mean_loss,
                        gen_seconds,
                        train_seconds: train_start.elapsed().as_secs_f64(),
                    }
                }
                TrainerKind::FedProx { mu } => {
                    train_start = Instant::now();
                    let out = local_train_fedprox(global, ds, &cfg.local, *mu, seed)?;
                    ClientResult {
                        update: ClientUpdate {
                            client_id: id,
                            params: out.model,
                            num_samples: ds.len(),
                            delta_c: None,
                        },
                        new_c_k: None,
                        mean_loss: out.mean_loss,
                        gen_seconds,
                        train_seconds: train_start.elapsed().as_secs_f64(),
                    }
                }
                TrainerKind::Scaffold => {
                    train_start = Instant::now();
                    let out = local_train_scaffold(
                        global,
                        ds,
                        &cfg.local,
                        c_global,
                        &clients[id].c_k,
                        seed,
                    )?;
                    ClientResult {
                        update: ClientUpdate {
                            client_id: id,
                            params: out.model,
                            num_samples: ds.len(),
                            delta_c: Some(out.delta_c),
                        },
                        new_c_k: Some(out.new_c_k),
                        mean_loss: out.mean_loss,
                        gen_seconds,
                        train_seconds: train_start.elapsed().as_secs_f64(),
                    }
                }
                TrainerKind::FedCog {
                    lambda_kd,
                    adaptive_weights,
                } => {
                    if cfg.generation_enabled {
                        let hist = label_histogram(ds);
                        // Generation counterpart: the client's most recent
                        // local model, falling back to the current global
                        // model (which makes the disagreement term inert).
                        let counterpart =
                            clients[id].last_local.as_ref().unwrap_or(global);
                        let gen_start = Instant::now();
                        let gen = generate(
                            global,
                            counterpart,
                            &hist,
                            &cfg.gen,
                            mix_seed(&[cfg.seed, round as u64, id as u64, 0x6a]),
                        )?;
                        gen_seconds = gen_start.elapsed().as_secs_f64();
                        let weights = if *adaptive_weights {
                            let d_hat = crate::data::complementary_distribution(&hist);
                            adaptive_kd_coefficients(hist.total(), d_hat.total())?
                        } else {
                            (1.0, *lambda_kd)
                        };
                        train_start = Instant::now();
                        let out =
                            local_train_fedcog(global, ds, &gen, &cfg.local, weights, seed)?;
                        ClientResult {
                            update: ClientUpdate {
                                client_id: id,
                                params: out.model,
                                num_samples: ds.len(),
                                delta_c: None,
                            },
                            new_c_k: None,
                            mean_loss: out.mean_loss,
                            gen_seconds,
                            train_seconds: train_start.elapsed().as_secs_f64(),
                        }
                    } else {
                        // Warm start: degrade to the non-generating base.
                        train_start = Instant::now();
                        let out = local_train_fedavg(global, ds, &cfg.local, seed)?;
                        ClientResult {
                            update: ClientUpdate {
                                client_id: id,
                                params: out.model,
                                num_samples: ds.len(),
                                delta_c: None,
                            },
                            new_c_k: None,
                            mean_loss: out.mean_loss,
                            gen_seconds,
                            train_seconds: train_start.elapsed().as_secs_f64(),
                        }
                    }
                }
            };
            Ok(outcome)
        })
        .collect();
    let mut client_results = Vec::with_capacity(results.len());
    for r in results {
        client_results.push(r?);
    }

    // Server-side aggregation. With masking on, only MaskedUpdate values
    // cross into the aggregation calls.
    let updates: Vec<&ClientUpdate> = client_results.iter().map(|r| &r.update).collect();
    let aggregated = if cfg.secagg {
        let owned: Vec<ClientUpdate> = updates.iter().map(|u| (*u).clone()).collect();
        let outcome = secagg_mask(&owned, mix_seed(&[cfg.seed, round as u64, 0x5a]))?;
        if let Some(w) = outcome.warning {
            record.warnings.push(w);
        }
        let ids: Vec<usize> = owned.iter().map(|u| u.client_id).collect();
        secagg_sum(&outcome.updates, &ids)?
    } else {
        let owned: Vec<ClientUpdate> = updates.iter().map(|u| (*u).clone()).collect();
        aggregate(&owned)?
    };
    let new_global = match cfg.server_momentum {
        Some(m) => apply_server_momentum(&state.global, &mut state.momentum_buf, aggregated, m)?,
        None => aggregated,
    };

    // Client-side bookkeeping and diagnostics.
    for r in &client_results {
        let id = r.update.client_id;
        state.clients[id].last_local = Some(r.update.params.clone());
        if let Some(c) = &r.new_c_k {
            state.clients[id].c_k = c.clone();
        }
        record.mean_train_loss.push(r.mean_loss);
        record.gen_seconds.push(r.gen_seconds);
        record.train_seconds.push(r.train_seconds);
        let mut diff = r.update.params.clone();
        diff.axpy(-1.0, &new_global);
        let l2: f64 = diff.flat_iter().map(|v| v * v).sum::<f64>().sqrt();
        record.model_diff_l2.push(l2);
    }
    if matches!(cfg.method, TrainerKind::Scaffold) {
        let k_total = state.clients.len() as f64;
        for r in &client_results {
            if let Some(dc) = &r.update.delta_c {
                state.c_global.axpy(1.0 / k_total, dc);
            }
        }
    }

    state.global = new_global;
    state.round += 1;
    record.round = round;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn update(id: usize, vals: &[f64], n: usize) -> ClientUpdate {
        let mut p = ModelParams::zeros(&[vals.len(), 1]);
        for (w, &v) in p.layers[0].weight.data_mut().iter_mut().zip(vals) {
            *w = v;
        }
        ClientUpdate {
            client_id: id,
            params: p,
            num_samples: n,
            delta_c: None,
        }
    }

    fn weights(p: &ModelParams) -> Vec<f64> {
        p.layers[0].weight.data().to_vec()
    }

    #[test]
    fn aggregate_equal_weights() {
        let agg = aggregate(&[update(0, &[1.0, 2.0], 100), update(1, &[3.0, 4.0], 100)]).unwrap();
        assert_eq!(weights(&agg), vec![2.0, 3.0]);
    }

    #[test]
    fn aggregate_weighted() {
        let agg = aggregate(&[update(0, &[0.0, 0.0], 100), update(1, &[4.0, 8.0], 300)]).unwrap();
        assert_eq!(weights(&agg), vec![3.0, 6.0]);
    }

    #[test]
    fn aggregate_single_and_idempotent() {
        let u = update(0, &[1.5, -2.5], 10);
        let agg = aggregate(&[u.clone()]).unwrap();
        assert_eq!(agg, u.params);
        // Three identical copies with awkward weights: exact identity.
        let copies = vec![
            update(0, &[1.5, -2.5], 1),
            update(1, &[1.5, -2.5], 3),
            update(2, &[1.5, -2.5], 7),
        ];
        assert_eq!(aggregate(&copies).unwrap(), u.params);
    }

    #[test]
    fn aggregate_rejects_empty() {
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn momentum_zero_reduces_to_aggregate() {
        let global = update(0, &[1.0, 1.0], 1).params;
        let agg = update(0, &[0.5, 0.25], 1).params;
        let mut buf = None;
        let out = apply_server_momentum(&global, &mut buf, agg.clone(), 0.0).unwrap();
        assert_eq!(out, agg);
    }

    #[test]
    fn momentum_accumulates_pseudo_gradient() {
        // Identical pseudo-gradient g in two successive rounds: the second
        // update magnitude is (1 + momentum) * g.
        let m = 0.1;
        let theta0 = update(0, &[1.0], 1).params;
        let g = 0.2;
        let mut buf = None;
        let agg1 = update(0, &[1.0 - g], 1).params;
        let theta1 = apply_server_momentum(&theta0, &mut buf, agg1, m).unwrap();
        let t1 = weights(&theta1)[0];
        assert!((t1 - (1.0 - g)).abs() < 1e-12);
        let agg2 = update(0, &[t1 - g], 1).params;
        let theta2 = apply_server_momentum(&theta1, &mut buf, agg2, m).unwrap();
        let step2 = t1 - weights(&theta2)[0];
        assert!((step2 - (1.0 + m) * g).abs() < 1e-12);
    }

    #[test]
    fn sample_clients_cases() {
        let all = sample_clients(5, 5, 0, 1).unwrap();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        let ten = sample_clients(200, 10, 3, 9).unwrap();
        assert_eq!(ten.len(), 10);
        assert!(ten.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_clients(200, 10, 3, 9).unwrap(), ten);
        assert!(sample_clients(5, 6, 0, 1).is_err());
    }

    fn random_updates(n: usize, seed: u64) -> Vec<ClientUpdate> {
        let mut out = Vec::new();
        for i in 0..n {
            let p = ModelParams::random_init(&[4, 3, 2], seed + i as u64);
            out.push(ClientUpdate {
                client_id: i,
                params: p,
                num_samples: 10 + i * 7,
                delta_c: None,
            });
        }
        out
    }

    #[test]
    fn secagg_sum_matches_aggregate() {
        let updates = random_updates(10, 3);
        let plain = aggregate(&updates).unwrap();
        let masked = secagg_mask(&updates, 99).unwrap();
        assert!(masked.warning.is_none());
        let ids: Vec<usize> = updates.iter().map(|u| u.client_id).collect();
        let summed = secagg_sum(&masked.updates, &ids).unwrap();
        for (a, b) in summed.flat_iter().zip(plain.flat_iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn secagg_two_clients_antisymmetric() {
        let updates = random_updates(2, 5);
        let total: usize = updates.iter().map(|u| u.num_samples).sum();
        let masked = secagg_mask(&updates, 7).unwrap().updates;
        let p0 = updates[0].num_samples as f64 / total as f64;
        let p1 = updates[1].num_samples as f64 / total as f64;
        let noise: Vec<(f64, f64)> = masked[0]
            .masked_params()
            .flat_iter()
            .zip(updates[0].params.flat_iter())
            .zip(
                masked[1]
                    .masked_params()
                    .flat_iter()
                    .zip(updates[1].params.flat_iter()),
            )
            .map(|((m0, r0), (m1, r1))| (m0 - p0 * r0, m1 - p1 * r1))
            .collect();
        for (n0, n1) in noise {
            assert!((n0 + n1).abs() < 1e-12);
        }
    }

    #[test]
    fn secagg_masked_values_differ_from_raw() {
        let updates = random_updates(3, 11);
        let masked = secagg_mask(&updates, 13).unwrap().updates;
        for (m, u) in masked.iter().zip(&updates) {
            let differs = m
                .masked_params()
                .flat_iter()
                .zip(u.params.flat_iter())
                .any(|(a, b)| (a - b).abs() > 1e-6);
            assert!(differs, "masked update leaked raw parameters");
        }
    }

    #[test]
    fn secagg_single_participant_warns() {
        let updates = random_updates(1, 2);
        let out = secagg_mask(&updates, 1).unwrap();
        assert!(out.warning.is_some());
        assert_eq!(out.updates[0].masked_params(), &updates[0].params);
    }

    #[test]
    fn secagg_sum_rejects_missing_participant() {
        let updates = random_updates(3, 17);
        let masked = secagg_mask(&updates, 19).unwrap().updates;
        let partial = &masked[..2];
        assert!(secagg_sum(partial, &[0, 1, 2]).is_err());
    }

    #[test]
    fn secagg_sum_order_invariant() {
        let updates = random_updates(4, 23);
        let ids: Vec<usize> = updates.iter().map(|u| u.client_id).collect();
        let mut masked = secagg_mask(&updates, 29).unwrap().updates;
        let a = secagg_sum(&masked, &ids).unwrap();
        masked.reverse();
        let b = secagg_sum(&masked, &ids).unwrap();
        for (x, y) in a.flat_iter().zip(b.flat_iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn tiny_world(seed: u64) -> (SimState, Vec<LabeledDataset>) {
        let ds = crate::data::synth_blobs(3, 30, 6, 0.2, seed);
        let spec = crate::data::PartitionSpec {
            kind: crate::data::PartitionKind::Iid,
            num_clients: 3,
            seed,
        };
        let parts = crate::data::partition(&ds, &spec).unwrap();
        let global = ModelParams::random_init(&[6, 8, 3], seed);
        (SimState::new(global, 3), parts)
    }

    fn base_cfg() -> RoundConfig {
        RoundConfig {
            method: TrainerKind::FedAvg,
            server_momentum: None,
            local: LocalRunConfig {
                tau: 5,
                lr: 0.05,
                batch_size: 8,
            },
            gen: GenConfig {
                num_samples: 6,
                steps: 2,
                ..Default::default()
            },
            generation_enabled: false,
            participation: 3,
            secagg: false,
            seed: 42,
        }
    }

    #[test]
    fn round_is_deterministic() {
        let (mut s1, parts) = tiny_world(1);
        let (mut s2, _) = tiny_world(1);
        let cfg = base_cfg();
        run_round(&mut s1, &parts, &cfg).unwrap();
        run_round(&mut s2, &parts, &cfg).unwrap();
        assert_eq!(s1.global, s2.global);
    }

    #[test]
    fn fedcog_without_kd_or_steps_reduces_to_fedavg_round() {
        let (mut avg_state, parts) = tiny_world(2);
        let (mut cog_state, _) = tiny_world(2);
        let avg_cfg = base_cfg();
        let cog_cfg = RoundConfig {
            method: TrainerKind::FedCog {
                lambda_kd: 0.0,
                adaptive_weights: false,
            },
            gen: GenConfig {
                num_samples: 6,
                steps: 0,
                ..Default::default()
            },
            generation_enabled: true,
            ..base_cfg()
        };
        run_round(&mut avg_state, &parts, &avg_cfg).unwrap();
        run_round(&mut cog_state, &parts, &cog_cfg).unwrap();
        assert_eq!(avg_state.global, cog_state.global);
    }

    #[test]
    fn single_client_round_returns_that_client() {
        let ds = crate::data::synth_blobs(3, 30, 6, 0.2, 5);
        let global = ModelParams::random_init(&[6, 8, 3], 5);
        let mut state = SimState::new(global, 1);
        let cfg = RoundConfig {
            participation: 1,
            ..base_cfg()
        };
        run_round(&mut state, std::slice::from_ref(&ds), &cfg).unwrap();
        assert_eq!(
            state.clients[0].last_local.as_ref().unwrap(),
            &state.global
        );
    }

    #[test]
    fn tau_zero_round_is_noop_on_global() {
        let (mut state, parts) = tiny_world(9);
        let before = state.global.clone();
        let cfg = RoundConfig {
            local: LocalRunConfig {
                tau: 0,
                lr: 0.05,
                batch_size: 8,
            },
            ..base_cfg()
        };
        run_round(&mut state, &parts, &cfg).unwrap();
        assert_eq!(state.global, before);
    }

    #[test]
    fn secagg_round_matches_plain_round() {
        let (mut plain, parts) = tiny_world(12);
        let (mut masked, _) = tiny_world(12);
        let plain_cfg = base_cfg();
        let masked_cfg = RoundConfig {
            secagg: true,
            ..base_cfg()
        };
        run_round(&mut plain, &parts, &plain_cfg).unwrap();
        run_round(&mut masked, &parts, &masked_cfg).unwrap();
        for (a, b) in plain.global.flat_iter().zip(masked.global.flat_iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_client_is_skipped_with_warning() {
        let (mut state, mut parts) = tiny_world(15);
        parts[1] = LabeledDataset {
            features: Tensor::zeros(vec![0, 6]),
            labels: vec![],
            num_classes: 3,
        };
        let record = run_round(&mut state, &parts, &base_cfg()).unwrap();
        assert!(record.warnings.iter().any(|w| w.contains("client 1")));
        assert_eq!(record.sampled, vec![0, 2]);
    }
}
