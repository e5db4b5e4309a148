//! Browser demo: three interactive views over the simulator library.
//!
//! Each operation takes and returns JSON strings so the page needs no
//! generated bindings beyond the function exports:
//!
//! - `account`: the zCDP accountant and budget gate, live under parameter
//!   sliders;
//! - `noise_profile`: per-round tree-noise scale (the popcount law) against
//!   the linear independent-noise baseline, plus one sampled noise path;
//! - `mini_run`: a small federated experiment on a slice of the bundled
//!   corpus, with per-round accuracy and loss.
//!
//! The logic lives in plain functions (tested natively); the wasm-bindgen
//! exports are thin wrappers.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::wasm_bindgen;

use fedsim::ddp::{ddp_zcdp_contribution, DdpConfig};
use fedsim::dpftrl::{DpFtrlServer, NoiseTree, PrivacyLedger};
use fedsim::federation::{
    run_round, sample_cohort, AggregationBackend, ClientHyper, CohortSpec, ParticipationAudit,
    PlainMeanBackend, Population, RoundResult, SecAggBackend,
};
use fedsim::harness::{
    build_vocab, majority_baseline_accuracy, partition_users, single_dataset, split_corpus,
    BUNDLED_CORPUS,
};
use fedsim::model::{evaluate, init_model};
use fedsim::rng::derive_seed;

fn err_json(message: impl std::fmt::Display) -> String {
    serde_json::json!({ "error": message.to_string() }).to_string()
}

// ---------------------------------------------------------------------------
// Accountant explorer
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct AccountRequest {
    clip_norm: f64,
    noise_multiplier: f64,
    rounds: u64,
    min_separation: u64,
    /// Distributed noise parameter; negative or absent means "no DDP layer".
    #[serde(default = "default_mu")]
    ddp_mu: f64,
    #[serde(default = "default_scale")]
    ddp_scale: f64,
    #[serde(default = "default_min_clients")]
    min_aggregation: u64,
    #[serde(default = "default_delta")]
    delta: f64,
    budget_rho: Option<f64>,
}

fn default_mu() -> f64 {
    -1.0
}
fn default_scale() -> f64 {
    64.0
}
fn default_min_clients() -> u64 {
    10
}
fn default_delta() -> f64 {
    1e-10
}

/// Build the ledger for one parameter point.
pub fn account_impl(request_json: &str) -> String {
    let req: AccountRequest = match serde_json::from_str(request_json) {
        Ok(r) => r,
        Err(e) => return err_json(e),
    };
    let rho_ddp = if req.ddp_mu >= 0.0 {
        Some(ddp_zcdp_contribution(&DdpConfig {
            clip_norm: req.clip_norm,
            scale: req.ddp_scale,
            field_bits: 32,
            noise_mu: req.ddp_mu,
            expected_clients: req.min_aggregation.max(1),
            min_clients: req.min_aggregation.max(1),
        }))
    } else {
        None
    };
    match PrivacyLedger::build(
        req.clip_norm,
        req.noise_multiplier,
        req.rounds,
        req.min_separation,
        rho_ddp,
        &[req.delta],
        req.budget_rho,
    ) {
        Ok(ledger) => ledger.to_json(),
        Err(e) => err_json(e),
    }
}

// ---------------------------------------------------------------------------
// Tree-noise profile
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct NoiseProfileRequest {
    rounds: u64,
    noise_multiplier: f64,
    clip_norm: f64,
    report_goal: u64,
    seed: u64,
}

#[derive(Debug, Serialize)]
struct NoiseProfileResponse {
    /// Per-round standard deviation of the cumulative tree noise:
    /// sigma * sqrt(popcount(t)).
    tree_std: Vec<f64>,
    /// What independent per-round noise would accumulate to: sigma * sqrt(t).
    independent_std: Vec<f64>,
    popcount: Vec<u32>,
    /// One sampled cumulative-noise trajectory (first coordinate).
    sample_path: Vec<f64>,
    sigma: f64,
}

pub fn noise_profile_impl(request_json: &str) -> String {
    let req: NoiseProfileRequest = match serde_json::from_str(request_json) {
        Ok(r) => r,
        Err(e) => return err_json(e),
    };
    if req.rounds == 0 || req.rounds > 4096 {
        return err_json("rounds must lie in 1..=4096");
    }
    if req.report_goal == 0 {
        return err_json("report_goal must be >= 1");
    }
    let sigma = req.noise_multiplier * req.clip_norm / req.report_goal as f64;
    let tree = match NoiseTree::new(req.rounds, 1, sigma, req.seed) {
        Ok(t) => t,
        Err(e) => return err_json(e),
    };
    let mut response = NoiseProfileResponse {
        tree_std: Vec::new(),
        independent_std: Vec::new(),
        popcount: Vec::new(),
        sample_path: Vec::new(),
        sigma,
    };
    for t in 1..=req.rounds {
        let pc = t.count_ones();
        response.popcount.push(pc);
        response.tree_std.push(sigma * (pc as f64).sqrt());
        response.independent_std.push(sigma * (t as f64).sqrt());
        match tree.cumulative_noise(t) {
            Ok(v) => response.sample_path.push(v.0[0]),
            Err(e) => return err_json(e),
        }
    }
    serde_json::to_string(&response).unwrap_or_else(err_json)
}

// ---------------------------------------------------------------------------
// Mini federated run
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct MiniRunRequest {
    /// "plain", "secagg" or "secagg_ddp".
    backend: String,
    rounds: u64,
    population: usize,
    report_goal: usize,
    #[serde(default)]
    dropout_rate: f64,
    noise_multiplier: f64,
    #[serde(default)]
    ddp_mu: f64,
    seed: u64,
}

#[derive(Debug, Serialize)]
struct MiniRoundRow {
    round: u64,
    survivors: usize,
    aborted: bool,
    accuracy: f64,
    picked_ratio: f64,
    log_loss: f64,
}

#[derive(Debug, Serialize)]
struct MiniRunResponse {
    rows: Vec<MiniRoundRow>,
    majority_baseline: f64,
    total_rho: serde_json::Value,
}

const MINI_VOCAB: usize = 40;
const MINI_EMBED: usize = 8;
const MINI_CORPUS_LINES: usize = 2500;
const MINI_CLIP: f64 = 1.0;
const MINI_SCALE: f64 = 256.0;

/// Run a small experiment in memory (no filesystem, wasm-safe).
pub fn mini_run_impl(request_json: &str) -> String {
    let req: MiniRunRequest = match serde_json::from_str(request_json) {
        Ok(r) => r,
        Err(e) => return err_json(e),
    };
    match mini_run_inner(&req) {
        Ok(r) => serde_json::to_string(&r).unwrap_or_else(err_json),
        Err(e) => err_json(e),
    }
}

fn mini_run_inner(req: &MiniRunRequest) -> Result<MiniRunResponse, String> {
    if req.rounds == 0 || req.rounds > 60 {
        return Err("rounds must lie in 1..=60".into());
    }
    if req.population > 200 || req.population < req.report_goal {
        return Err("population must satisfy report_goal <= population <= 200".into());
    }
    if req.report_goal < 3 {
        return Err("report_goal must be >= 3".into());
    }
    if !(0.0..1.0).contains(&req.dropout_rate) {
        return Err("dropout_rate must lie in [0, 1)".into());
    }

    // A slice of the bundled corpus keeps the in-browser run snappy.
    let text: String = BUNDLED_CORPUS
        .lines()
        .take(MINI_CORPUS_LINES)
        .collect::<Vec<_>>()
        .join("\n");
    let vocab = build_vocab(&text, MINI_VOCAB).map_err(|e| e.to_string())?;
    let splits = split_corpus(&text).map_err(|e| e.to_string())?;
    let members = partition_users(&vocab, &splits.train, req.population).map_err(|e| e.to_string())?;
    let heldout = single_dataset(&vocab, &splits.heldout, "heldout_eval");
    let majority = majority_baseline_accuracy(&vocab, &splits.heldout);

    let (model, init) =
        init_model(&vocab, MINI_EMBED, derive_seed(req.seed, "init", 0)).map_err(|e| e.to_string())?;
    let mut pop = Population::new(members);
    let sigma = req.noise_multiplier * MINI_CLIP / req.report_goal as f64;
    let tree = NoiseTree::new(req.rounds, model.param_count(), sigma, derive_seed(req.seed, "tree", 0))
        .map_err(|e| e.to_string())?;
    let mut server = DpFtrlServer::new(init.clone(), tree, 1.0, 0.0);

    let ddp = DdpConfig {
        clip_norm: MINI_CLIP,
        scale: MINI_SCALE,
        field_bits: 32,
        noise_mu: req.ddp_mu,
        expected_clients: req.report_goal as u64,
        min_clients: (req.report_goal / 2).max(1) as u64,
    };
    let mut backend: Box<dyn AggregationBackend> = match req.backend.as_str() {
        "plain" => Box::new(PlainMeanBackend),
        "secagg" | "secagg_ddp" => {
            let n = req.report_goal;
            let (k, t) = SecAggBackend::default_params(n);
            let mu = if req.backend == "secagg" { 0.0 } else { req.ddp_mu };
            Box::new(
                SecAggBackend::new(DdpConfig { noise_mu: mu, ..ddp }, k, t)
                    .map_err(|e| e.to_string())?,
            )
        }
        other => return Err(format!("unknown backend {other:?} (plain, secagg, secagg_ddp)")),
    };

    let spec = CohortSpec {
        report_goal: req.report_goal,
        min_aggregation: (req.report_goal / 2).max(1),
        min_separation: 2,
        dropout_rate: req.dropout_rate,
    };
    let hyper = ClientHyper { epochs: 1, lr: 0.5, clip_norm: MINI_CLIP };
    let mut audit = ParticipationAudit::default();
    let mut checkpoint = init;
    let mut rows = Vec::with_capacity(req.rounds as usize);
    for round in 1..=req.rounds {
        let (survivors, aborted) =
            match sample_cohort(&pop, round, &spec, derive_seed(req.seed, "cohort", round)) {
                Ok(plan) => {
                    let outcome = run_round(
                        &mut pop, &plan, &checkpoint, &model, &hyper, backend.as_mut(),
                        &mut server, &mut audit, req.seed,
                    )
                    .map_err(|e| e.to_string())?;
                    if let RoundResult::Proceeded(ckpt) = outcome.result {
                        checkpoint = ckpt;
                        (outcome.survivor_count, false)
                    } else {
                        (outcome.survivor_count, true)
                    }
                }
                Err(_) => (0, true),
            };
        let metrics = evaluate(&model, &checkpoint, std::slice::from_ref(&heldout), 3)
            .map_err(|e| e.to_string())?;
        rows.push(MiniRoundRow {
            round,
            survivors,
            aborted,
            accuracy: metrics.prediction_accuracy,
            picked_ratio: metrics.picked_ratio_proxy,
            log_loss: metrics.mean_log_loss,
        });
    }

    let rho_ddp = if req.backend == "secagg_ddp" { Some(ddp_zcdp_contribution(&ddp)) } else { None };
    let ledger = PrivacyLedger::build(
        MINI_CLIP,
        req.noise_multiplier,
        req.rounds,
        spec.min_separation,
        rho_ddp,
        &[],
        None,
    )
    .map_err(|e| e.to_string())?;
    let total_rho = if ledger.total_rho.is_finite() {
        serde_json::json!(ledger.total_rho)
    } else {
        serde_json::Value::String("infinity".into())
    };

    Ok(MiniRunResponse { rows, majority_baseline: majority, total_rho })
}

// ---------------------------------------------------------------------------
// wasm exports
// ---------------------------------------------------------------------------

#[wasm_bindgen]
pub fn account(request_json: &str) -> String {
    account_impl(request_json)
}

#[wasm_bindgen]
pub fn noise_profile(request_json: &str) -> String {
    noise_profile_impl(request_json)
}

#[wasm_bindgen]
pub fn mini_run(request_json: &str) -> String {
    mini_run_impl(request_json)
}
