//! End-to-end experiment pipelines: corpus partition, optional pretraining,
//! T federated rounds through the configured aggregation backend, and the
//! output files (metrics CSV, telemetry JSONL, ledger JSON, checkpoint).
//!
//! The final checkpoint is written only when the privacy ledger passes its
//! budget gate; a FAIL verdict withholds the model file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::config::{ExperimentConfig, Mode};
use super::corpus::{
    build_vocab, load_corpus, majority_baseline_accuracy, partition_users, single_dataset,
    split_corpus, CorpusSplits,
};
use super::HarnessError;
use crate::ddp::ddp_zcdp_contribution;
use crate::dpftrl::{DpFtrlServer, NoiseTree, PrivacyLedger, Verdict};
use crate::federation::{
    run_round, sample_cohort, AggregationBackend, ClientHyper, CohortSpec, FederationError,
    ParticipationAudit, PlainMeanBackend, Population, RoundResult, SecAggBackend, TelemetryRecord,
};
use crate::model::{
    evaluate, init_model, pretrain, write_checkpoint, MetricsReport, NwpModel, ParameterVector,
};
use crate::rng::derive_seed;

pub const METRICS_FILE: &str = "metrics.csv";
pub const TELEMETRY_FILE: &str = "telemetry.jsonl";
pub const LEDGER_FILE: &str = "ledger.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.txt";

pub const METRICS_HEADER: &str =
    "round,survivors,aborted,prediction_accuracy,picked_ratio_proxy,mean_log_loss";

/// One metrics row (also one telemetry record's metric snapshot).
#[derive(Debug, Clone)]
pub struct RoundStats {
    pub round: u64,
    pub survivors: usize,
    pub aborted: bool,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckpointStatus {
    Written(PathBuf),
    Withheld,
}

#[derive(Debug)]
pub struct ExperimentResult {
    pub per_round: Vec<RoundStats>,
    pub ledger: PrivacyLedger,
    pub checkpoint: CheckpointStatus,
    pub telemetry_path: PathBuf,
    pub metrics_path: PathBuf,
    /// Final model parameters (released or not) for in-process consumers.
    pub final_params: ParameterVector,
    pub audit: ParticipationAudit,
    /// Majority-class oracle accuracy on the heldout split.
    pub majority_baseline: f64,
}

/// Everything data-independent the accountant needs, exposed standalone:
/// the dry-run ledger is identical to what `run_experiment` produces.
pub fn account(cfg: &ExperimentConfig) -> Result<PrivacyLedger, HarnessError> {
    let rho_ddp = match cfg.mode {
        Mode::Baseline | Mode::DpOnly => None,
        Mode::SecaggOnly | Mode::DpSecaggDdp => Some(ddp_zcdp_contribution(&cfg.ddp_config())),
    };
    Ok(PrivacyLedger::build_with_restarts(
        cfg.clip_norm,
        cfg.noise_multiplier,
        cfg.rounds,
        cfg.min_separation,
        cfg.tree_restarts,
        rho_ddp,
        &[cfg.delta],
        cfg.budget_rho,
    )?)
}

struct Prepared {
    model: NwpModel,
    params: ParameterVector,
    population: Vec<(String, crate::model::LocalDataset)>,
    heldout: crate::model::LocalDataset,
    majority_baseline: f64,
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, HarnessError> {
    let text = load_corpus(cfg.corpus_path.as_deref())?;
    let vocab = build_vocab(&text, cfg.vocab_size)?;
    let CorpusSplits { train, pretrain: pre, heldout } = split_corpus(&text)?;
    let population = partition_users(&vocab, &train, cfg.population_size)?;
    let majority = majority_baseline_accuracy(&vocab, &heldout);

    let (model, mut params) = init_model(&vocab, cfg.embed_dim, derive_seed(cfg.seed, "init", 0))?;
    if cfg.pretrain_steps > 0 {
        let public = single_dataset(&vocab, &pre, "public_pretrain");
        params = pretrain(
            &model,
            &params,
            &public,
            cfg.pretrain_steps,
            cfg.pretrain_lr,
            derive_seed(cfg.seed, "pretrain", 0),
        )?;
    }
    let heldout_ds = single_dataset(&vocab, &heldout, "heldout_eval");
    Ok(Prepared {
        model,
        params,
        population,
        heldout: heldout_ds,
        majority_baseline: majority,
    })
}

/// Run the pretraining stage only and write the resulting checkpoint.
pub fn run_pretrain(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf, HarnessError> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(EFFECTIVE_CONFIG_FILE), cfg.effective_echo())?;
    let prepared = prepare(cfg)?;
    let path = out_dir.join(CHECKPOINT_FILE);
    write_checkpoint(&path, &prepared.params)?;
    Ok(path)
}

/// Evaluate a checkpoint file against the heldout split.
pub fn run_evaluate(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<MetricsReport, HarnessError> {
    let prepared = prepare(&ExperimentConfig { pretrain_steps: 0, ..cfg.clone() })?;
    let params = crate::model::read_checkpoint(checkpoint)?;
    Ok(evaluate(&prepared.model, &params, std::slice::from_ref(&prepared.heldout), cfg.top_k)?)
}

pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentResult, HarnessError> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(EFFECTIVE_CONFIG_FILE), cfg.effective_echo())?;

    let prepared = prepare(cfg)?;
    let Prepared { model, params, population, heldout, majority_baseline, .. } = prepared;
    let mut pop = Population::new(population);

    // Node noise on the mean stream: per-user sensitivity C / report_goal
    // folded into sigma = z * C / report_goal. The tree re-keys at segment
    // boundaries when dp.tree_restarts > 1; the ledger composes each
    // segment's rho additively.
    let sigma = cfg.noise_multiplier * cfg.clip_norm / cfg.report_goal as f64;
    let segments = crate::dpftrl::restart_segments(cfg.rounds, cfg.tree_restarts);
    let mut segment_starts: Vec<u64> = Vec::with_capacity(segments.len());
    let mut next_start = 1;
    for len in &segments {
        segment_starts.push(next_start);
        next_start += len;
    }
    let new_server = |segment_index: usize, init: ParameterVector| -> Result<DpFtrlServer, HarnessError> {
        let tree = NoiseTree::new(
            segments[segment_index],
            model.param_count(),
            sigma,
            derive_seed(cfg.seed, "tree", segment_index as u64),
        )?;
        Ok(DpFtrlServer::new(init, tree, cfg.server_lr, cfg.server_momentum))
    };
    let mut server = new_server(0, params.clone())?;

    let mut backend: Box<dyn AggregationBackend> = match cfg.mode {
        Mode::Baseline | Mode::DpOnly => Box::new(PlainMeanBackend),
        Mode::SecaggOnly | Mode::DpSecaggDdp => {
            let (k, t) = cfg.secagg_params();
            let mut backend = SecAggBackend::new(cfg.ddp_config(), k, t)
                .map_err(|e| HarnessError::Setup(e.to_string()))?;
            if cfg.secagg_transcript {
                backend = backend.with_transcript_dir(out_dir.to_path_buf());
            }
            Box::new(backend)
        }
    };

    let spec = CohortSpec {
        report_goal: cfg.report_goal,
        min_aggregation: cfg.min_aggregation,
        min_separation: cfg.min_separation,
        dropout_rate: cfg.dropout_rate,
    };
    let hyper = ClientHyper { epochs: cfg.client_epochs, lr: cfg.client_lr, clip_norm: cfg.clip_norm };

    let metrics_path = out_dir.join(METRICS_FILE);
    let telemetry_path = out_dir.join(TELEMETRY_FILE);
    let mut metrics_csv = String::from(METRICS_HEADER);
    metrics_csv.push('\n');
    let mut telemetry_jsonl = String::new();
    let mut per_round = Vec::with_capacity(cfg.rounds as usize);
    let mut audit = ParticipationAudit::default();
    let mut checkpoint = params;

    for round in 1..=cfg.rounds {
        if let Some(segment_index) = segment_starts.iter().position(|&s| s == round) {
            if segment_index > 0 {
                server = new_server(segment_index, checkpoint.clone())?;
            }
        }
        let telemetry = match sample_cohort(&pop, round, &spec, derive_seed(cfg.seed, "cohort", round)) {
            Ok(plan) => {
                let outcome = run_round(
                    &mut pop,
                    &plan,
                    &checkpoint,
                    &model,
                    &hyper,
                    backend.as_mut(),
                    &mut server,
                    &mut audit,
                    cfg.seed,
                )?;
                if let RoundResult::Proceeded(new_ckpt) = outcome.result {
                    checkpoint = new_ckpt;
                }
                outcome.telemetry
            }
            Err(FederationError::PopulationExhausted { .. }) => TelemetryRecord {
                round_index: round,
                cohort_size: 0,
                survivor_count: 0,
                abort_flag: true,
                abort_reason: Some("population_exhausted".to_string()),
                wall_time_ms: 0,
                metrics: None,
            },
            Err(e) => return Err(e.into()),
        };

        let metrics = evaluate(&model, &checkpoint, std::slice::from_ref(&heldout), cfg.top_k)?;
        let record = TelemetryRecord { metrics: Some(metrics.clone()), ..telemetry };
        telemetry_jsonl.push_str(&serde_json::to_string(&record)?);
        telemetry_jsonl.push('\n');
        metrics_csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            round,
            record.survivor_count,
            u8::from(record.abort_flag),
            metrics.prediction_accuracy,
            metrics.picked_ratio_proxy,
            metrics.mean_log_loss,
        ));
        per_round.push(RoundStats {
            round,
            survivors: record.survivor_count,
            aborted: record.abort_flag,
            metrics,
        });
    }

    fs::write(&metrics_path, metrics_csv)?;
    fs::write(&telemetry_path, telemetry_jsonl)?;

    let ledger = account(cfg)?;
    let mut ledger_file = fs::File::create(out_dir.join(LEDGER_FILE))?;
    ledger_file.write_all(ledger.to_json().as_bytes())?;
    ledger_file.write_all(b"\n")?;

    let checkpoint_status = match ledger.verdict {
        Verdict::Pass => {
            let path = out_dir.join(CHECKPOINT_FILE);
            write_checkpoint(&path, &checkpoint)?;
            CheckpointStatus::Written(path)
        }
        Verdict::Fail => {
            // A rerun into a directory holding an older passing checkpoint
            // must not leave the stale model file behind.
            let path = out_dir.join(CHECKPOINT_FILE);
            if path.exists() {
                fs::remove_file(&path)?;
            }
            CheckpointStatus::Withheld
        }
    };

    Ok(ExperimentResult {
        per_round,
        ledger,
        checkpoint: checkpoint_status,
        telemetry_path,
        metrics_path,
        final_params: checkpoint,
        audit,
        majority_baseline,
    })
}

