//! Deterministic single-process simulator of a privacy-preserving federated
//! learning stack: federated rounds over simulated clients, dropout-tolerant
//! secure aggregation, distributed DP on quantized updates, and a DP-FTRL
//! server with user-level zCDP accounting, exercised end to end on a tiny
//! next-word-prediction model.
//!
//! Everything is a pure function of configuration and a master seed; a full
//! experiment replays byte-identically. Cryptography is simulation-grade and
//! NOT SECURE FOR PRODUCTION — the contract here is protocol correctness and
//! information flow, reproducibly testable.
//!
//! ```
//! use fedsim::harness::{account, run_experiment, CheckpointStatus, ExperimentConfig};
//!
//! let cfg = ExperimentConfig::parse_str(
//!     "mode = DP_ONLY\n\
//!      rounds = 4\n\
//!      population.size = 30\n\
//!      cohort.report_goal = 6\n\
//!      cohort.min_aggregation = 3\n\
//!      cohort.min_separation = 2\n\
//!      model.vocab_size = 20\n\
//!      model.embed_dim = 4\n\
//!      dp.noise_multiplier = 2.0\n\
//!      dp.budget_rho = 5.0\n",
//! )?;
//!
//! // The accountant is pure: this ledger equals the one a full run emits.
//! let ledger = account(&cfg)?;
//! assert!(ledger.total_rho <= 5.0);
//!
//! let dir = tempfile::tempdir()?;
//! let result = run_experiment(&cfg, dir.path())?;
//! assert_eq!(result.ledger, ledger);
//! assert!(matches!(result.checkpoint, CheckpointStatus::Written(_)));
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

// `!(x > 0.0)` is used on purpose throughout: it rejects NaN along with
// nonpositive values, which `x <= 0.0` would not.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ddp;
pub mod dpftrl;
pub mod federation;
pub mod harness;
pub mod model;
pub mod rng;
pub mod secagg;
