//! Paired-run comparison: two configurations over the same model, corpus and
//! seed, reported as per-round utility deltas plus both privacy ledgers.

use std::path::Path;

use serde::Serialize;

use super::config::ExperimentConfig;
use super::experiment::{run_experiment, ExperimentResult};
use super::HarnessError;

#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub round: u64,
    pub accuracy_a: f64,
    pub accuracy_b: f64,
    pub accuracy_delta: f64,
    pub log_loss_a: f64,
    pub log_loss_b: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LedgerSummary {
    pub mode: String,
    pub rho_central: serde_json::Value,
    pub rho_ddp: serde_json::Value,
    pub total_rho: serde_json::Value,
}

#[derive(Debug, Serialize)]
pub struct CompareReport {
    pub per_round: Vec<CompareRow>,
    pub ledger_a: LedgerSummary,
    pub ledger_b: LedgerSummary,
    pub tolerance: f64,
    /// Final-round accuracy difference b - a.
    pub utility_delta: f64,
    pub within_tolerance: bool,
    pub verdict: String,
}

fn rho_value(rho: f64) -> serde_json::Value {
    if rho.is_finite() {
        serde_json::json!(rho)
    } else {
        serde_json::Value::String("infinity".into())
    }
}

fn summarize(mode: &str, result: &ExperimentResult) -> LedgerSummary {
    LedgerSummary {
        mode: mode.to_string(),
        rho_central: rho_value(result.ledger.rho_central),
        rho_ddp: result
            .ledger
            .rho_ddp
            .map(rho_value)
            .unwrap_or(serde_json::Value::Null),
        total_rho: rho_value(result.ledger.total_rho),
    }
}

/// The fields two configs must share for their runs to be comparable.
fn check_basis(a: &ExperimentConfig, b: &ExperimentConfig) -> Result<(), HarnessError> {
    let mismatch = |field: &str| Err(HarnessError::ComparisonBasis(field.to_string()));
    if a.seed != b.seed {
        return mismatch("seed");
    }
    if a.corpus_path != b.corpus_path {
        return mismatch("corpus.path");
    }
    if a.vocab_size != b.vocab_size || a.embed_dim != b.embed_dim {
        return mismatch("model.*");
    }
    if a.rounds != b.rounds {
        return mismatch("rounds");
    }
    if a.population_size != b.population_size {
        return mismatch("population.size");
    }
    if a.top_k != b.top_k {
        return mismatch("eval.top_k");
    }
    Ok(())
}

pub fn compare(
    cfg_a: &ExperimentConfig,
    cfg_b: &ExperimentConfig,
    out_dir: &Path,
) -> Result<CompareReport, HarnessError> {
    check_basis(cfg_a, cfg_b)?;
    let result_a = run_experiment(cfg_a, &out_dir.join("a"))?;
    let result_b = run_experiment(cfg_b, &out_dir.join("b"))?;

    let per_round: Vec<CompareRow> = result_a
        .per_round
        .iter()
        .zip(&result_b.per_round)
        .map(|(ra, rb)| CompareRow {
            round: ra.round,
            accuracy_a: ra.metrics.prediction_accuracy,
            accuracy_b: rb.metrics.prediction_accuracy,
            accuracy_delta: rb.metrics.prediction_accuracy - ra.metrics.prediction_accuracy,
            log_loss_a: ra.metrics.mean_log_loss,
            log_loss_b: rb.metrics.mean_log_loss,
        })
        .collect();

    let utility_delta = per_round.last().map(|r| r.accuracy_delta).unwrap_or(0.0);
    let within = utility_delta.abs() <= cfg_a.compare_tolerance;
    let report = CompareReport {
        per_round,
        ledger_a: summarize(cfg_a.mode.as_str(), &result_a),
        ledger_b: summarize(cfg_b.mode.as_str(), &result_b),
        tolerance: cfg_a.compare_tolerance,
        utility_delta,
        within_tolerance: within,
        verdict: format!(
            "utility delta within {}: {}",
            cfg_a.compare_tolerance,
            if within { "yes" } else { "no" }
        ),
    };

    std::fs::write(
        out_dir.join("compare.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    Ok(report)
}
