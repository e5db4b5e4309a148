//! Tiny next-word-prediction model: vocabulary, parameter vector, local SGD,
//! clipping, and evaluation metrics.
//!
//! The architecture is deliberately small: token embeddings, a mean-pooled
//! context window of width 2, one tanh hidden layer of the same width as the
//! embedding, and a softmax output. Everything is `f64` internally and pure —
//! training and evaluation are functions of (inputs, seed) only.

mod checkpoint;
mod nwp;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, CHECKPOINT_MAGIC};
pub use nwp::{evaluate, init_model, local_train, pretrain, NwpModel};

use std::collections::BTreeMap;

use thiserror::Error;

/// Context window width: predictions condition on the two preceding tokens.
pub const CONTEXT_WIDTH: usize = 2;

/// Reserved vocabulary index for out-of-vocabulary tokens.
pub const OOV_INDEX: usize = 0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("vocabulary needs at least 2 tokens, got {0}")]
    VocabTooSmall(usize),
    #[error("embed_dim must be >= 1")]
    ZeroEmbedDim,
    #[error("dataset for user {0} is empty")]
    EmptyDataset(String),
    #[error("no evaluation data")]
    EmptyHeldout,
    #[error("top-k must satisfy 1 <= k <= vocab size, got k={k}, V={vocab}")]
    BadTopK { k: usize, vocab: usize },
    #[error("clip norm must be positive, got {0}")]
    BadClipNorm(f64),
    #[error("parameter vector has length {got}, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("token index {index} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { index: usize, vocab: usize },
}

/// Ordered token list with the OOV token at index 0.
///
/// Ordering is deterministic: descending corpus frequency, ties broken
/// lexicographically. The token-to-index map is a bijection over `0..len()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

/// Display form of the reserved OOV token.
pub const OOV_TOKEN: &str = "<oov>";

impl Vocabulary {
    /// Build a vocabulary of at most `max_size` entries (including the OOV
    /// slot) from an iterator of tokens.
    pub fn build<'a>(tokens: impl Iterator<Item = &'a str>, max_size: usize) -> Result<Self, ModelError> {
        if max_size < 2 {
            return Err(ModelError::VocabTooSmall(max_size));
        }
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for t in tokens {
            *counts.entry(t).or_insert(0) += 1;
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        // Descending frequency; BTreeMap iteration already gave lexicographic
        // order, and the stable sort preserves it within equal counts.
        ranked.sort_by_key(|&(_, count)| std::cmp::Reverse(count));
        let mut toks = Vec::with_capacity(max_size);
        toks.push(OOV_TOKEN.to_string());
        for (t, _) in ranked.into_iter().take(max_size - 1) {
            toks.push(t.to_string());
        }
        Self::from_tokens(toks)
    }

    /// Wrap an explicit token list; index 0 must be the OOV token.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, ModelError> {
        if tokens.len() < 2 {
            return Err(ModelError::VocabTooSmall(tokens.len()));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            index.insert(t.clone(), i);
        }
        assert_eq!(index.len(), tokens.len(), "duplicate token in vocabulary");
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token index, or the OOV index for unknown tokens.
    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(OOV_INDEX)
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }
}

/// Dense, flattened model weights or update delta.
///
/// Flattening order is fixed and bijective with the structured view:
/// embedding rows (V x E, row-major), hidden weights (E x H, row-major),
/// output weights (H x V, row-major), hidden bias (H), output bias (V).
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector(pub Vec<f64>);

impl ParameterVector {
    pub fn zeros(dim: usize) -> Self {
        ParameterVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn l2_norm(&self) -> f64 {
        // Index-ascending summation, like every float reduction in this crate.
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn linf_distance(&self, other: &ParameterVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn add_assign(&mut self, other: &ParameterVector) {
        assert_eq!(self.dim(), other.dim());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.0 {
            *a *= factor;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Scale `delta` to `delta * min(1, clip_norm / ||delta||_2)`.
///
/// A hair of relative slack in the comparison keeps clipping idempotent:
/// rescaling can leave the recomputed norm a few ulps above the bound, and
/// those must not trigger a second rescale.
pub fn clip_update(delta: &ParameterVector, clip_norm: f64) -> Result<ParameterVector, ModelError> {
    if !(clip_norm > 0.0) {
        return Err(ModelError::BadClipNorm(clip_norm));
    }
    let norm = delta.l2_norm();
    let mut out = delta.clone();
    if norm > clip_norm * (1.0 + 1e-12) {
        out.scale(clip_norm / norm);
    }
    Ok(out)
}

/// One simulated user's training data: token-index sequences.
#[derive(Debug, Clone)]
pub struct LocalDataset {
    /// Opaque simulation-only identifier. Must never reach any aggregate
    /// output or telemetry; tests grep emitted files for these strings.
    pub user_id: String,
    pub sequences: Vec<Vec<usize>>,
}

impl LocalDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), ModelError> {
        for seq in &self.sequences {
            for &tok in seq {
                if tok >= vocab_size {
                    return Err(ModelError::TokenOutOfRange { index: tok, vocab: vocab_size });
                }
            }
        }
        Ok(())
    }
}

/// Clipped or raw model delta reported by one client for one round.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub delta: ParameterVector,
    /// Example count used for training (>= 1).
    pub weight: u64,
    pub round_index: u64,
}

/// Heldout evaluation summary.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MetricsReport {
    /// Fraction of next-token events where the true token was the top-1
    /// prediction.
    pub prediction_accuracy: f64,
    /// Fraction of events where the true token was among the top-k shown
    /// candidates. A heldout proxy for a live picked ratio, hence the name.
    pub picked_ratio_proxy: f64,
    /// Mean natural-log loss over all events.
    pub mean_log_loss: f64,
    pub n_eval: u64,
}
