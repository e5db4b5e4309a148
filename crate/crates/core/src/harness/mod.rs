//! Configuration, corpus ingestion, experiment pipelines, and output files.

mod compare;
mod config;
mod corpus;
mod experiment;

pub use compare::{compare, CompareReport, CompareRow};
pub use config::{ConfigError, ExperimentConfig, Mode};
pub use corpus::{
    build_vocab, load_corpus, majority_baseline_accuracy, partition_users, single_dataset,
    split_corpus, tokenize_line, CorpusError, CorpusSplits, BUNDLED_CORPUS,
};
pub use experiment::{
    account, run_evaluate, run_experiment, run_pretrain, CheckpointStatus, ExperimentResult,
    RoundStats, CHECKPOINT_FILE, EFFECTIVE_CONFIG_FILE, LEDGER_FILE, METRICS_FILE,
    METRICS_HEADER, TELEMETRY_FILE,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Checkpoint(#[from] crate::model::CheckpointError),
    #[error(transparent)]
    Federation(#[from] crate::federation::FederationError),
    #[error(transparent)]
    DpFtrl(#[from] crate::dpftrl::DpFtrlError),
    #[error(transparent)]
    Accounting(#[from] crate::dpftrl::AccountingError),
    #[error("backend setup failed: {0}")]
    Setup(String),
    #[error("configs are not comparable: they differ in {0}")]
    ComparisonBasis(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
