//! User-level zCDP accounting for the tree mechanism, the zCDP to
//! (epsilon, delta) conversion, and the privacy ledger with its budget gate.
//!
//! The bound is deliberately conservative: one participation touches at most
//! ceil(log2 T) + 1 tree nodes, each node is a Gaussian release with per-node
//! zCDP 1/(2 z^2), and a user participates at most k_max times, so
//! rho = k_max * (ceil(log2 T) + 1) / (2 z^2). No amplification-by-sampling
//! credit is taken.

use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AccountingError {
    #[error("noise multiplier must be positive, got {0}")]
    BadNoiseMultiplier(f64),
    #[error("clip norm must be positive, got {0}")]
    BadClipNorm(f64),
    #[error("delta must lie in (0, 1), got {0}")]
    BadDelta(f64),
    #[error("rho must be >= 0, got {0}")]
    BadRho(f64),
    #[error("k_max must be >= 1")]
    BadKMax,
}

/// Number of tree nodes on a leaf-to-root path: ceil(log2 T) + 1.
pub fn tree_height(rounds: u64) -> u32 {
    if rounds <= 1 {
        return 1;
    }
    rounds.next_power_of_two().trailing_zeros() + 1
}

/// Participation cap implied by the min-separation policy: a client can
/// appear in at most ceil(T / min_separation) of T rounds. min_separation
/// of 0 or 1 does not restrict anything.
pub fn k_max_from_policy(rounds: u64, min_separation: u64) -> u64 {
    if min_separation <= 1 {
        return rounds.max(1);
    }
    rounds.div_ceil(min_separation).max(1)
}

/// zCDP of the tree mechanism under at most `k_max` participations.
///
/// Sensitivity per node is the clip bound C against node noise sigma = z*C,
/// so C cancels; it is still validated because a nonpositive clip bound
/// means the sensitivity story is broken upstream.
pub fn account_zcdp(clip_norm: f64, z: f64, rounds: u64, k_max: u64) -> Result<f64, AccountingError> {
    if !(clip_norm > 0.0) {
        return Err(AccountingError::BadClipNorm(clip_norm));
    }
    if !(z > 0.0) {
        return Err(AccountingError::BadNoiseMultiplier(z));
    }
    if k_max == 0 {
        return Err(AccountingError::BadKMax);
    }
    if rounds == 0 {
        return Ok(0.0);
    }
    let h = tree_height(rounds) as f64;
    Ok(k_max as f64 * h / (2.0 * z * z))
}

/// Standard conversion: epsilon = rho + 2 * sqrt(rho * ln(1/delta)).
pub fn zcdp_to_eps(rho: f64, delta: f64) -> Result<f64, AccountingError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AccountingError::BadDelta(delta));
    }
    if rho < 0.0 {
        return Err(AccountingError::BadRho(rho));
    }
    if rho.is_infinite() {
        return Ok(f64::INFINITY);
    }
    Ok(rho + 2.0 * (rho * (1.0 / delta).ln()).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
        }
    }
}

impl Serialize for Verdict {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

/// PASS iff the accumulated rho fits the budget (inclusive boundary).
pub fn check_budget(total_rho: f64, budget_rho: f64) -> Verdict {
    if total_rho <= budget_rho {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conversion {
    pub delta: f64,
    pub eps: f64,
}

/// Final privacy accounting of an experiment.
///
/// `rho_central` is infinite when z = 0 (no central mechanism) and
/// `rho_ddp` is infinite when mu = 0 (distributed layer configured but
/// promising nothing by itself). The total sums the finite contributions —
/// conservative, since each finite bound already holds alone — and is
/// infinite only if no mechanism provides a finite bound.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyLedger {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub rounds: u64,
    pub min_separation: u64,
    pub k_max: u64,
    pub rho_central: f64,
    /// None: no distributed layer configured. Some(inf): configured with
    /// mu = 0, i.e. "no distributed guarantee".
    pub rho_ddp: Option<f64>,
    pub total_rho: f64,
    pub conversions: Vec<Conversion>,
    pub budget: Option<f64>,
    pub verdict: Verdict,
}

/// Lengths of the tree segments when the mechanism re-keys `restarts`
/// times over `rounds` rounds: near-equal parts, longer segments first.
pub fn restart_segments(rounds: u64, restarts: u64) -> Vec<u64> {
    let restarts = restarts.clamp(1, rounds.max(1));
    let base = rounds / restarts;
    let extra = rounds % restarts;
    (0..restarts).map(|i| base + u64::from(i < extra)).collect()
}

impl PrivacyLedger {
    pub fn build(
        clip_norm: f64,
        noise_multiplier: f64,
        rounds: u64,
        min_separation: u64,
        rho_ddp: Option<f64>,
        deltas: &[f64],
        budget: Option<f64>,
    ) -> Result<PrivacyLedger, AccountingError> {
        Self::build_with_restarts(
            clip_norm,
            noise_multiplier,
            rounds,
            min_separation,
            1,
            rho_ddp,
            deltas,
            budget,
        )
    }

    /// Ledger for a tree that re-keys `restarts` times: each segment is its
    /// own mechanism and the rho values compose additively.
    #[allow(clippy::too_many_arguments)]
    pub fn build_with_restarts(
        clip_norm: f64,
        noise_multiplier: f64,
        rounds: u64,
        min_separation: u64,
        restarts: u64,
        rho_ddp: Option<f64>,
        deltas: &[f64],
        budget: Option<f64>,
    ) -> Result<PrivacyLedger, AccountingError> {
        let k_max = k_max_from_policy(rounds, min_separation);
        let rho_central = if noise_multiplier > 0.0 {
            let mut total = 0.0;
            for seg in restart_segments(rounds, restarts) {
                let k_seg = k_max_from_policy(seg, min_separation);
                total += account_zcdp(clip_norm, noise_multiplier, seg, k_seg)?;
            }
            total
        } else {
            f64::INFINITY
        };
        let total_rho = combine_rho(rho_central, rho_ddp);
        let conversions = deltas
            .iter()
            .map(|&delta| Ok(Conversion { delta, eps: zcdp_to_eps(total_rho, delta)? }))
            .collect::<Result<Vec<_>, AccountingError>>()?;
        let verdict = match budget {
            Some(b) => check_budget(total_rho, b),
            None => Verdict::Pass,
        };
        Ok(PrivacyLedger {
            clip_norm,
            noise_multiplier,
            rounds,
            min_separation,
            k_max,
            rho_central,
            rho_ddp,
            total_rho,
            conversions,
            budget,
            verdict,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ledger serializes")
    }
}

/// Sum of the finite contributions; infinite only when nothing is finite.
fn combine_rho(rho_central: f64, rho_ddp: Option<f64>) -> f64 {
    let mut total = 0.0;
    let mut any_finite = false;
    for rho in [Some(rho_central), rho_ddp].into_iter().flatten() {
        if rho.is_finite() {
            total += rho;
            any_finite = true;
        }
    }
    if any_finite {
        total
    } else {
        f64::INFINITY
    }
}

fn json_rho(rho: f64) -> serde_json::Value {
    if rho.is_finite() {
        serde_json::json!(rho)
    } else {
        serde_json::Value::String("infinity".into())
    }
}

impl Serialize for PrivacyLedger {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("PrivacyLedger", 11)?;
        st.serialize_field("C", &self.clip_norm)?;
        st.serialize_field("z", &self.noise_multiplier)?;
        st.serialize_field("T", &self.rounds)?;
        st.serialize_field("min_separation", &self.min_separation)?;
        st.serialize_field("k_max", &self.k_max)?;
        st.serialize_field("rho_central", &json_rho(self.rho_central))?;
        st.serialize_field("rho_ddp", &self.rho_ddp.map(json_rho))?;
        st.serialize_field("total_rho", &json_rho(self.total_rho))?;
        let conversions: Vec<serde_json::Value> = self
            .conversions
            .iter()
            .map(|c| serde_json::json!({"delta": c.delta, "eps": json_rho(c.eps)}))
            .collect();
        st.serialize_field("conversions", &conversions)?;
        st.serialize_field("budget", &self.budget)?;
        st.serialize_field("verdict", &self.verdict)?;
        st.end()
    }
}
