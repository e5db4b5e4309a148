//! Aggregation backends. `run_round` hands the survivors' clipped updates to
//! a backend and gets back only the mean update; whether the mean came from
//! plaintext averaging or a masked protocol round is invisible above this
//! trait.

use std::collections::BTreeMap;

use thiserror::Error;

use super::RoundPlan;
use crate::ddp::{add_discrete_noise, dequantize_sum, quantize, DdpConfig, DdpError};
use crate::model::{ClientUpdate, ParameterVector};
use crate::rng::derive_seed;
use crate::secagg::{build_topology, run_secagg, CommGraph, DropoutSchedule, SecAggError};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("no updates to aggregate")]
    Empty,
    #[error(transparent)]
    SecAgg(#[from] SecAggError),
    #[error(transparent)]
    Ddp(#[from] DdpError),
    #[error("cannot write transcript: {0}")]
    Transcript(std::io::Error),
}

pub trait AggregationBackend {
    /// Aggregate the survivors' updates into one mean update.
    ///
    /// `survivor_positions` are indices into `plan.cohort`, aligned with
    /// `updates`; backends that model the full protocol use them to replay
    /// the round's dropouts at the protocol level.
    fn aggregate(
        &mut self,
        plan: &RoundPlan,
        survivor_positions: &[usize],
        updates: Vec<ClientUpdate>,
        seed: u64,
    ) -> Result<ParameterVector, BackendError>;

    fn name(&self) -> &'static str;
}

/// Plaintext mean in survivor order (fixed reduction order).
#[derive(Debug, Default)]
pub struct PlainMeanBackend;

impl AggregationBackend for PlainMeanBackend {
    fn aggregate(
        &mut self,
        _plan: &RoundPlan,
        _survivor_positions: &[usize],
        updates: Vec<ClientUpdate>,
        _seed: u64,
    ) -> Result<ParameterVector, BackendError> {
        let Some(first) = updates.first() else {
            return Err(BackendError::Empty);
        };
        let mut sum = ParameterVector::zeros(first.delta.dim());
        for u in &updates {
            sum.add_assign(&u.delta);
        }
        sum.scale(1.0 / updates.len() as f64);
        Ok(sum)
    }

    fn name(&self) -> &'static str {
        "plain_mean"
    }
}

/// Secure aggregation over quantized updates, optionally with per-client
/// discrete noise (the SECAGG and SECAGG_DDP modes differ only in mu).
///
/// The protocol runs over the full cohort: every member advertises and
/// shares keys, this round's dropped clients vanish before MASKED_INPUT, and
/// the unmask step recovers exactly the survivors' sum.
#[derive(Debug)]
pub struct SecAggBackend {
    pub ddp: DdpConfig,
    /// Neighbor count; clamped to cohort-1 (complete graph).
    pub degree_k: usize,
    /// Reconstruction threshold.
    pub threshold_t: usize,
    /// When set, each round's protocol transcript is dumped to
    /// `transcript_round_NNNNN.jsonl` in this directory.
    pub transcript_dir: Option<std::path::PathBuf>,
}

impl SecAggBackend {
    pub fn new(ddp: DdpConfig, degree_k: usize, threshold_t: usize) -> Result<SecAggBackend, BackendError> {
        ddp.validate()?;
        Ok(SecAggBackend { ddp, degree_k, threshold_t, transcript_dir: None })
    }

    pub fn with_transcript_dir(mut self, dir: std::path::PathBuf) -> SecAggBackend {
        self.transcript_dir = Some(dir);
        self
    }

    /// Defaults for a cohort of n: t = min(ceil(2n/3), k), k = min(n-1, 50).
    pub fn default_params(cohort: usize) -> (usize, usize) {
        let k = cohort.saturating_sub(1).clamp(1, 50);
        let t = (2 * cohort).div_ceil(3).min(k).max(1);
        (k, t)
    }
}

impl AggregationBackend for SecAggBackend {
    fn aggregate(
        &mut self,
        plan: &RoundPlan,
        survivor_positions: &[usize],
        updates: Vec<ClientUpdate>,
        seed: u64,
    ) -> Result<ParameterVector, BackendError> {
        if updates.is_empty() {
            return Err(BackendError::Empty);
        }
        let n = plan.cohort.len();
        let dim = updates[0].delta.dim();
        let field = self.ddp.field(dim)?;

        // Quantize and perturb each survivor's update before it goes on the
        // wire.
        let mut inputs: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
        for (&pos, update) in survivor_positions.iter().zip(&updates) {
            let qv = quantize(&update.delta, &self.ddp, derive_seed(seed, "quantize", pos as u64))?;
            let noisy = add_discrete_noise(&qv, self.ddp.noise_mu, derive_seed(seed, "skellam", pos as u64))?;
            inputs.insert(pos, noisy.entries);
        }

        let k = self.degree_k.min(n.saturating_sub(1)).max(1);
        let graph = if k == n - 1 {
            CommGraph::complete(n)
        } else {
            build_topology(n, k, self.threshold_t, derive_seed(seed, "topology", plan.round_index))?
        };

        let dropped: std::collections::BTreeSet<usize> =
            (0..n).filter(|p| !survivor_positions.contains(p)).collect();
        let schedule = DropoutSchedule { after_share_keys: dropped, ..Default::default() };

        let outcome = run_secagg(
            plan.round_index,
            &field,
            &graph,
            self.threshold_t,
            &inputs,
            &schedule,
            derive_seed(seed, "protocol", plan.round_index),
        )?;
        debug_assert_eq!(outcome.survivors.len(), updates.len());

        if let Some(dir) = &self.transcript_dir {
            let path = dir.join(format!("transcript_round_{:05}.jsonl", plan.round_index));
            if let Err(e) = std::fs::write(&path, outcome.transcript.to_jsonl()) {
                return Err(BackendError::Transcript(e));
            }
        }

        Ok(dequantize_sum(&outcome.sum, updates.len() as u64, &self.ddp)?)
    }

    fn name(&self) -> &'static str {
        if self.ddp.noise_mu > 0.0 {
            "secagg_ddp"
        } else {
            "secagg"
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::{
        run_round, sample_cohort, ClientHyper, CohortSpec, ParticipationAudit, Population,
        RoundResult,
    };
    use crate::model::{init_model, LocalDataset, Vocabulary};
    use crate::rng::DetRng;

    fn make_update(delta: Vec<f64>) -> ClientUpdate {
        ClientUpdate { delta: ParameterVector(delta), weight: 1, round_index: 1 }
    }

    fn plan_of(n: usize) -> RoundPlan {
        RoundPlan {
            round_index: 1,
            cohort: (0..n).collect(),
            report_goal: n,
            min_aggregation: 1,
            dropout_rate: 0.0,
        }
    }

    fn test_ddp(scale: f64, mu: f64, n: u64) -> DdpConfig {
        DdpConfig {
            clip_norm: 1.0,
            scale,
            field_bits: 32,
            noise_mu: mu,
            expected_clients: n,
            min_clients: 1,
        }
    }

    #[test]
    fn plain_mean_is_the_arithmetic_mean() {
        let mut backend = PlainMeanBackend;
        let updates = vec![
            make_update(vec![1.0, 0.0]),
            make_update(vec![0.0, 1.0]),
            make_update(vec![0.5, 0.5]),
        ];
        let mean = backend.aggregate(&plan_of(3), &[0, 1, 2], updates, 0).unwrap();
        assert_eq!(mean.0, vec![0.5, 0.5]);
    }

    #[test]
    fn secagg_without_noise_matches_plain_mean_within_quantization() {
        let n = 6;
        let scale = 4096.0;
        let mut rng = DetRng::new(4);
        let updates: Vec<ClientUpdate> = (0..n)
            .map(|_| make_update((0..10).map(|_| rng.next_f64() * 0.2 - 0.1).collect()))
            .collect();
        let positions: Vec<usize> = (0..n).collect();

        let mut plain = PlainMeanBackend;
        let expected = plain.aggregate(&plan_of(n), &positions, updates.clone(), 0).unwrap();

        let mut secagg =
            SecAggBackend::new(test_ddp(scale, 0.0, n as u64), n - 1, 4).unwrap();
        let got = secagg.aggregate(&plan_of(n), &positions, updates, 7).unwrap();

        assert!(got.linf_distance(&expected) <= 2.0 / scale, "diff {}", got.linf_distance(&expected));
    }

    #[test]
    fn secagg_handles_round_dropouts() {
        let n = 8;
        let scale = 1024.0;
        let mut rng = DetRng::new(9);
        // Survivors are cohort positions 0, 2, 3, 5, 6 — the rest dropped
        // before upload.
        let positions = vec![0usize, 2, 3, 5, 6];
        let updates: Vec<ClientUpdate> = positions
            .iter()
            .map(|_| make_update((0..5).map(|_| rng.next_f64() * 0.2 - 0.1).collect()))
            .collect();

        let mut plain = PlainMeanBackend;
        let expected = plain.aggregate(&plan_of(n), &positions, updates.clone(), 0).unwrap();
        let mut secagg =
            SecAggBackend::new(test_ddp(scale, 0.0, n as u64), n - 1, 3).unwrap();
        let got = secagg.aggregate(&plan_of(n), &positions, updates, 5).unwrap();
        assert!(got.linf_distance(&expected) <= 2.0 / scale);
    }

    #[test]
    fn too_many_protocol_dropouts_surface_as_errors() {
        let n = 6;
        let positions = vec![0usize, 1];
        let updates: Vec<ClientUpdate> =
            positions.iter().map(|_| make_update(vec![0.1, 0.1])).collect();
        let mut secagg = SecAggBackend::new(test_ddp(64.0, 0.0, n as u64), n - 1, 4).unwrap();
        let err = secagg.aggregate(&plan_of(n), &positions, updates, 3).unwrap_err();
        assert!(matches!(err, BackendError::SecAgg(SecAggError::ThresholdNotMet { .. })));
    }

    /// Three clients, plain mean, server lr 1, zero noise: the new
    /// checkpoint is exactly old + mean of the clipped deltas.
    #[test]
    fn round_pipeline_is_federated_averaging() {
        let mut toks = vec![crate::model::OOV_TOKEN.to_string()];
        for i in 1..8 {
            toks.push(format!("w{i}"));
        }
        let vocab = Vocabulary::from_tokens(toks).unwrap();
        let (model, params) = init_model(&vocab, 3, 11).unwrap();

        let members: Vec<(String, LocalDataset)> = (0..3)
            .map(|i| {
                let ds = LocalDataset {
                    user_id: format!("user_{i:04}"),
                    sequences: vec![vec![1 + i, 2, 3], vec![4, 5 + i]],
                };
                (format!("user_{i:04}"), ds)
            })
            .collect();
        let mut pop = Population::new(members);
        let spec = CohortSpec { report_goal: 3, min_aggregation: 1, min_separation: 0, dropout_rate: 0.0 };
        let plan = sample_cohort(&pop, 1, &spec, 21).unwrap();
        let hyper = ClientHyper { epochs: 1, lr: 0.2, clip_norm: 10.0 };

        // Expected: retrain each survivor the same way and average.
        let mut expected = ParameterVector::zeros(model.param_count());
        let train_seed = crate::rng::derive_seed(77, "train", 1);
        for &client in &plan.cohort {
            let upd = crate::model::local_train(
                &model,
                &params,
                pop.dataset(client),
                1,
                0.2,
                crate::rng::derive_seed(train_seed, "client", client as u64),
                1,
            )
            .unwrap();
            expected.add_assign(&upd.delta);
        }
        expected.scale(1.0 / 3.0);
        let mut want = params.clone();
        want.add_assign(&expected);

        let tree = crate::dpftrl::NoiseTree::new(4, model.param_count(), 0.0, 1).unwrap();
        let mut server = crate::dpftrl::DpFtrlServer::new(params.clone(), tree, 1.0, 0.0);
        let mut backend = PlainMeanBackend;
        let mut audit = ParticipationAudit::default();
        let outcome = run_round(
            &mut pop, &plan, &params, &model, &hyper, &mut backend, &mut server, &mut audit, 77,
        )
        .unwrap();
        match outcome.result {
            RoundResult::Proceeded(ckpt) => assert_eq!(ckpt.0, want.0),
            RoundResult::Aborted(_) => panic!("round aborted"),
        }
        assert_eq!(pop.last_participation(plan.cohort[0]), Some(1));
        assert_eq!(audit.0.len(), 3);
    }

    /// Forcing survivors below min_aggregation aborts and leaves all state
    /// untouched.
    #[test]
    fn abort_leaves_checkpoint_and_history_unchanged() {
        let mut toks = vec![crate::model::OOV_TOKEN.to_string()];
        for i in 1..6 {
            toks.push(format!("w{i}"));
        }
        let vocab = Vocabulary::from_tokens(toks).unwrap();
        let (model, params) = init_model(&vocab, 2, 3).unwrap();
        let members: Vec<(String, LocalDataset)> = (0..4)
            .map(|i| {
                (format!("user_{i:04}"), LocalDataset {
                    user_id: format!("user_{i:04}"),
                    sequences: vec![vec![1, 2]],
                })
            })
            .collect();
        let mut pop = Population::new(members);
        let plan = RoundPlan {
            round_index: 1,
            cohort: vec![0, 1, 2, 3],
            report_goal: 4,
            min_aggregation: 4,
            dropout_rate: 0.9,
        };
        let hyper = ClientHyper { epochs: 1, lr: 0.1, clip_norm: 1.0 };
        let tree = crate::dpftrl::NoiseTree::new(4, model.param_count(), 0.0, 1).unwrap();
        let mut server = crate::dpftrl::DpFtrlServer::new(params.clone(), tree, 1.0, 0.0);
        let mut backend = PlainMeanBackend;
        let mut audit = ParticipationAudit::default();
        let outcome = run_round(
            &mut pop, &plan, &params, &model, &hyper, &mut backend, &mut server, &mut audit, 5,
        )
        .unwrap();
        assert!(matches!(outcome.result, RoundResult::Aborted(super::super::AbortReason::BelowMinAggregation)));
        assert!(outcome.telemetry.abort_flag);
        // Checkpoint unchanged (server never stepped), history unchanged.
        assert_eq!(server.checkpoint().0, params.0);
        assert_eq!(server.steps_taken(), 0);
        for i in 0..4 {
            assert_eq!(pop.last_participation(i), None);
        }
        assert!(audit.0.is_empty());
    }

    /// The only things a SECAGG round exposes are the aggregate-derived
    /// checkpoint, the survivor count, and telemetry. The exhaustive
    /// destructuring below is the compile-visible audit: adding any
    /// per-client field to the outcome breaks this test.
    #[test]
    fn secagg_round_exposes_no_per_client_data() {
        let mut toks = vec![crate::model::OOV_TOKEN.to_string()];
        for i in 1..6 {
            toks.push(format!("w{i}"));
        }
        let vocab = Vocabulary::from_tokens(toks).unwrap();
        let (model, params) = init_model(&vocab, 2, 5).unwrap();
        let members: Vec<(String, LocalDataset)> = (0..5)
            .map(|i| {
                (format!("user_{i:04}"), LocalDataset {
                    user_id: format!("user_{i:04}"),
                    sequences: vec![vec![1, 2, 3]],
                })
            })
            .collect();
        let mut pop = Population::new(members);
        let spec = CohortSpec { report_goal: 5, min_aggregation: 2, min_separation: 0, dropout_rate: 0.0 };
        let plan = sample_cohort(&pop, 1, &spec, 2).unwrap();
        let hyper = ClientHyper { epochs: 1, lr: 0.1, clip_norm: 1.0 };
        let tree = crate::dpftrl::NoiseTree::new(4, model.param_count(), 0.0, 2).unwrap();
        let mut server = crate::dpftrl::DpFtrlServer::new(params.clone(), tree, 1.0, 0.0);
        let mut backend =
            SecAggBackend::new(test_ddp(256.0, 0.0, 5), 4, 3).unwrap();
        let mut audit = ParticipationAudit::default();
        let outcome = run_round(
            &mut pop, &plan, &params, &model, &hyper, &mut backend, &mut server, &mut audit, 9,
        )
        .unwrap();
        let super::super::RoundOutcome { result, survivor_count, telemetry } = outcome;
        assert!(matches!(result, RoundResult::Proceeded(_)));
        assert_eq!(survivor_count, 5);
        let super::super::TelemetryRecord {
            round_index,
            cohort_size,
            survivor_count: sc,
            abort_flag,
            abort_reason,
            wall_time_ms,
            metrics,
        } = telemetry;
        assert_eq!((round_index, cohort_size, sc, abort_flag), (1, 5, 5, false));
        assert_eq!(abort_reason, None);
        assert_eq!(wall_time_ms, 0);
        assert!(metrics.is_none());
    }
}
