//! Round orchestration: cohort sampling under the participation policy,
//! dropout simulation, minimum-aggregation enforcement, and the round
//! pipeline broadcast -> local train -> clip -> aggregate -> server step.
//!
//! Individual client updates exist only between local training and the
//! aggregation backend; everything a round returns is the aggregate-derived
//! checkpoint, a survivor count, and telemetry. Telemetry never carries user
//! identifiers or per-client statistics.

mod backends;

pub use backends::{AggregationBackend, PlainMeanBackend, SecAggBackend};

use std::collections::BTreeSet;

use thiserror::Error;

use crate::model::{
    clip_update, local_train, LocalDataset, MetricsReport, ModelError, NwpModel, ParameterVector,
};
use crate::rng::{derive_seed, DetRng};

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("population exhausted: {eligible} eligible clients, round needs {needed}")]
    PopulationExhausted { eligible: usize, needed: usize },
    #[error("round plan invalid: {0}")]
    BadPlan(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("aggregation failed: {0}")]
    Aggregation(String),
}

/// The simulated client base and its participation history.
#[derive(Debug)]
pub struct Population {
    members: Vec<(String, LocalDataset)>,
    last_participation: Vec<Option<u64>>,
}

impl Population {
    pub fn new(members: Vec<(String, LocalDataset)>) -> Population {
        let n = members.len();
        let mut ids = BTreeSet::new();
        for (id, _) in &members {
            assert!(ids.insert(id.clone()), "duplicate user id {id}");
        }
        Population { members, last_participation: vec![None; n] }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dataset(&self, index: usize) -> &LocalDataset {
        &self.members[index].1
    }

    pub fn user_id(&self, index: usize) -> &str {
        &self.members[index].0
    }

    pub fn last_participation(&self, index: usize) -> Option<u64> {
        self.last_participation[index]
    }

    /// Client indices allowed to participate in `round` under the
    /// min-separation policy: never participated, or last participated at
    /// least `min_separation` rounds ago.
    pub fn eligible(&self, round: u64, min_separation: u64) -> Vec<usize> {
        (0..self.members.len())
            .filter(|&i| match self.last_participation[i] {
                None => true,
                Some(last) => round.saturating_sub(last) >= min_separation,
            })
            .collect()
    }
}

/// Per-round cohort parameters.
#[derive(Debug, Clone, Copy)]
pub struct CohortSpec {
    pub report_goal: usize,
    pub min_aggregation: usize,
    pub min_separation: u64,
    pub dropout_rate: f64,
}

/// A sampled cohort for one round.
#[derive(Debug, Clone)]
pub struct RoundPlan {
    pub round_index: u64,
    /// Population indices, in selection order.
    pub cohort: Vec<usize>,
    pub report_goal: usize,
    pub min_aggregation: usize,
    pub dropout_rate: f64,
}

/// Uniform sample (without replacement) of `report_goal` eligible clients.
pub fn sample_cohort(
    pop: &Population,
    round: u64,
    spec: &CohortSpec,
    seed: u64,
) -> Result<RoundPlan, FederationError> {
    if spec.report_goal < spec.min_aggregation || spec.min_aggregation == 0 {
        return Err(FederationError::BadPlan(format!(
            "need report_goal >= min_aggregation >= 1, got {} and {}",
            spec.report_goal, spec.min_aggregation
        )));
    }
    if !(0.0..1.0).contains(&spec.dropout_rate) {
        return Err(FederationError::BadPlan(format!(
            "dropout_rate must lie in [0, 1), got {}",
            spec.dropout_rate
        )));
    }
    let eligible = pop.eligible(round, spec.min_separation);
    if eligible.len() < spec.report_goal {
        return Err(FederationError::PopulationExhausted {
            eligible: eligible.len(),
            needed: spec.report_goal,
        });
    }
    let mut rng = DetRng::new(seed);
    let picks = rng.sample_indices(eligible.len(), spec.report_goal);
    let cohort: Vec<usize> = picks.into_iter().map(|i| eligible[i]).collect();
    Ok(RoundPlan {
        round_index: round,
        cohort,
        report_goal: spec.report_goal,
        min_aggregation: spec.min_aggregation,
        dropout_rate: spec.dropout_rate,
    })
}

/// Each cohort member independently survives with probability
/// 1 - dropout_rate. Returns surviving population indices in cohort order.
pub fn simulate_dropouts(plan: &RoundPlan, seed: u64) -> Vec<usize> {
    let mut rng = DetRng::new(seed);
    plan.cohort
        .iter()
        .copied()
        .filter(|_| rng.next_f64() >= plan.dropout_rate)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MinAggDecision {
    Proceed,
    Abort,
}

/// Release gate: an aggregate may exist only if enough clients survived.
pub fn enforce_min_aggregation(survivor_count: usize, min_aggregation: usize) -> MinAggDecision {
    if survivor_count >= min_aggregation {
        MinAggDecision::Proceed
    } else {
        MinAggDecision::Abort
    }
}

/// Why a round produced no new checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AbortReason {
    PopulationExhausted,
    BelowMinAggregation,
    SecAggFailed(String),
}

impl AbortReason {
    pub fn as_str(&self) -> &str {
        match self {
            AbortReason::PopulationExhausted => "population_exhausted",
            AbortReason::BelowMinAggregation => "below_min_aggregation",
            AbortReason::SecAggFailed(_) => "secagg_failed",
        }
    }
}

/// A round either produces a new checkpoint or aborts with the input
/// checkpoint untouched.
#[derive(Debug, Clone)]
pub enum RoundResult {
    Proceeded(ParameterVector),
    Aborted(AbortReason),
}

/// One line of the telemetry stream. Contains no user ids and no per-client
/// update statistics; `wall_time_ms` is not modeled (fixed at zero) so that
/// replays of an experiment are bit-identical.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TelemetryRecord {
    pub round_index: u64,
    pub cohort_size: usize,
    pub survivor_count: usize,
    pub abort_flag: bool,
    pub abort_reason: Option<String>,
    pub wall_time_ms: u64,
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug)]
pub struct RoundOutcome {
    pub result: RoundResult,
    pub survivor_count: usize,
    pub telemetry: TelemetryRecord,
}

impl RoundOutcome {
    fn aborted(plan: &RoundPlan, survivors: usize, reason: AbortReason) -> RoundOutcome {
        RoundOutcome {
            survivor_count: survivors,
            telemetry: TelemetryRecord {
                round_index: plan.round_index,
                cohort_size: plan.cohort.len(),
                survivor_count: survivors,
                abort_flag: true,
                abort_reason: Some(reason.as_str().to_string()),
                wall_time_ms: 0,
                metrics: None,
            },
            result: RoundResult::Aborted(reason),
        }
    }
}

/// Server-side optimizer fed with one aggregate mean update per round.
pub trait ServerOptimizer {
    fn step(&mut self, mean_update: &ParameterVector) -> Result<ParameterVector, String>;
}

impl ServerOptimizer for crate::dpftrl::DpFtrlServer {
    fn step(&mut self, mean_update: &ParameterVector) -> Result<ParameterVector, String> {
        DpFtrlServer::step(self, mean_update).map_err(|e| e.to_string())
    }
}
use crate::dpftrl::DpFtrlServer;

/// Client-side training hyperparameters for one round.
#[derive(Debug, Clone, Copy)]
pub struct ClientHyper {
    pub epochs: u32,
    pub lr: f64,
    pub clip_norm: f64,
}

/// In-memory participation audit: (round, population index) per completed
/// participation. Simulation-side only — never written to telemetry.
#[derive(Debug, Default)]
pub struct ParticipationAudit(pub Vec<(u64, usize)>);

impl ParticipationAudit {
    /// Smallest round gap between two participations of the same client.
    pub fn min_gap(&self) -> Option<u64> {
        let mut by_client: std::collections::BTreeMap<usize, Vec<u64>> = Default::default();
        for &(round, client) in &self.0 {
            by_client.entry(client).or_default().push(round);
        }
        let mut min_gap = None;
        for rounds in by_client.values() {
            let mut sorted = rounds.clone();
            sorted.sort_unstable();
            for w in sorted.windows(2) {
                let gap = w[1] - w[0];
                min_gap = Some(min_gap.map_or(gap, |g: u64| g.min(gap)));
            }
        }
        min_gap
    }
}

/// Run one full round. On PROCEED the population's participation history and
/// the audit log gain the survivors; any abort leaves both untouched and
/// returns the reason in telemetry.
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    pop: &mut Population,
    plan: &RoundPlan,
    checkpoint: &ParameterVector,
    model: &NwpModel,
    hyper: &ClientHyper,
    backend: &mut dyn AggregationBackend,
    server: &mut dyn ServerOptimizer,
    audit: &mut ParticipationAudit,
    seed: u64,
) -> Result<RoundOutcome, FederationError> {
    for &i in &plan.cohort {
        if i >= pop.len() {
            return Err(FederationError::BadPlan(format!("cohort index {i} out of range")));
        }
    }

    let survivors = simulate_dropouts(plan, derive_seed(seed, "dropout", plan.round_index));
    if enforce_min_aggregation(survivors.len(), plan.min_aggregation) == MinAggDecision::Abort {
        return Ok(RoundOutcome::aborted(plan, survivors.len(), AbortReason::BelowMinAggregation));
    }
    // Cohort positions of the survivors (dropout filtering preserves order).
    let mut survivor_positions = Vec::with_capacity(survivors.len());
    {
        let mut next = 0;
        for (pos, &client) in plan.cohort.iter().enumerate() {
            if next < survivors.len() && survivors[next] == client {
                survivor_positions.push(pos);
                next += 1;
            }
        }
        debug_assert_eq!(survivor_positions.len(), survivors.len());
    }

    // Broadcast checkpoint, train each survivor locally, clip. Updates are
    // handed to the backend and drop out of scope here.
    let train_seed = derive_seed(seed, "train", plan.round_index);
    let mut updates = Vec::with_capacity(survivors.len());
    for &client in &survivors {
        let update = local_train(
            model,
            checkpoint,
            pop.dataset(client),
            hyper.epochs,
            hyper.lr,
            derive_seed(train_seed, "client", client as u64),
            plan.round_index,
        )?;
        let mut clipped = update;
        clipped.delta = clip_update(&clipped.delta, hyper.clip_norm)?;
        updates.push(clipped);
    }

    let agg_seed = derive_seed(seed, "aggregate", plan.round_index);
    let mean_update = match backend.aggregate(plan, &survivor_positions, updates, agg_seed) {
        Ok(mean) => mean,
        Err(e) => {
            return Ok(RoundOutcome::aborted(
                plan,
                survivors.len(),
                AbortReason::SecAggFailed(e.to_string()),
            ));
        }
    };

    let new_checkpoint = server
        .step(&mean_update)
        .map_err(FederationError::Aggregation)?;

    for &client in &survivors {
        pop.last_participation[client] = Some(plan.round_index);
        audit.0.push((plan.round_index, client));
    }

    Ok(RoundOutcome {
        result: RoundResult::Proceeded(new_checkpoint),
        survivor_count: survivors.len(),
        telemetry: TelemetryRecord {
            round_index: plan.round_index,
            cohort_size: plan.cohort.len(),
            survivor_count: survivors.len(),
            abort_flag: false,
            abort_reason: None,
            wall_time_ms: 0,
            metrics: None,
        },
    })
}
