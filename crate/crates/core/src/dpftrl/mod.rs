//! Central DP via tree-aggregated noise: the server's prefix sums of mean
//! updates carry correlated Gaussian noise from a complete binary tree over
//! the round horizon, so any prefix needs only O(log T) noise terms and the
//! per-round noise never accumulates linearly.

mod accountant;

pub use accountant::{
    account_zcdp, check_budget, k_max_from_policy, restart_segments, tree_height, zcdp_to_eps,
    AccountingError, Conversion, PrivacyLedger, Verdict,
};

use thiserror::Error;

use crate::model::ParameterVector;
use crate::rng::{derive_seed, DetRng};

#[derive(Debug, Error)]
pub enum DpFtrlError {
    #[error("step {t} outside tree horizon 1..={horizon}")]
    OutOfRange { t: u64, horizon: u64 },
    #[error("tree horizon must be >= 1")]
    EmptyHorizon,
    #[error("aggregate has dimension {got}, server expects {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("server already took {0} steps, tree horizon exhausted")]
    HorizonExhausted(u64),
}

/// Binary tree of per-node Gaussian noise over leaves 1..=horizon.
///
/// Node noise vectors are pure functions of (tree seed, node id), so reads
/// are parallel-safe and replay exactly. The cumulative noise at step t sums
/// exactly the nodes of t's dyadic decomposition: popcount(t) of them.
#[derive(Debug, Clone)]
pub struct NoiseTree {
    horizon: u64,
    dim: usize,
    /// Per-entry standard deviation of each node's noise.
    sigma: f64,
    seed: u64,
}

impl NoiseTree {
    pub fn new(horizon: u64, dim: usize, sigma: f64, seed: u64) -> Result<NoiseTree, DpFtrlError> {
        if horizon == 0 {
            return Err(DpFtrlError::EmptyHorizon);
        }
        Ok(NoiseTree { horizon, dim, sigma, seed })
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Dyadic cover of the prefix [1, t]: one node per set bit of t, highest
    /// level first. Node (level, index) covers leaves
    /// index*2^level + 1 ..= (index+1)*2^level.
    fn cover_nodes(t: u64) -> Vec<(u32, u64)> {
        let mut nodes = Vec::with_capacity(t.count_ones() as usize);
        let mut covered = 0u64;
        for level in (0..64).rev() {
            if t & (1 << level) != 0 {
                nodes.push((level, covered >> level));
                covered += 1 << level;
            }
        }
        nodes
    }

    fn node_noise(&self, level: u32, index: u64, out: &mut [f64]) {
        let node_id = ((level as u64) << 48) | index;
        let mut rng = DetRng::new(derive_seed(self.seed, "tree-node", node_id));
        for x in out.iter_mut() {
            *x += self.sigma * rng.next_gaussian();
        }
    }

    /// Noise attached to the prefix sum S_t; per-entry variance is
    /// sigma^2 * popcount(t).
    pub fn cumulative_noise(&self, t: u64) -> Result<ParameterVector, DpFtrlError> {
        if t == 0 || t > self.horizon {
            return Err(DpFtrlError::OutOfRange { t, horizon: self.horizon });
        }
        let mut out = vec![0.0; self.dim];
        if self.sigma == 0.0 {
            return Ok(ParameterVector(out));
        }
        for (level, index) in Self::cover_nodes(t) {
            self.node_noise(level, index, &mut out);
        }
        Ok(ParameterVector(out))
    }
}

/// DP-FTRL server optimizer state.
///
/// Per step: the raw prefix sum of mean updates gains the tree's cumulative
/// noise, the noisy increment feeds a momentum buffer, and the checkpoint
/// moves by lr * momentum. With zero momentum and lr 1 this reduces to plain
/// federated averaging on noisy prefix sums:
/// checkpoint_t = checkpoint_0 + noisy_prefix_t.
#[derive(Debug, Clone)]
pub struct DpFtrlServer {
    lr: f64,
    momentum_coef: f64,
    checkpoint: ParameterVector,
    momentum: ParameterVector,
    raw_prefix: ParameterVector,
    prev_noise: ParameterVector,
    tree: NoiseTree,
    steps_taken: u64,
}

impl DpFtrlServer {
    pub fn new(init: ParameterVector, tree: NoiseTree, lr: f64, momentum_coef: f64) -> DpFtrlServer {
        let dim = init.dim();
        DpFtrlServer {
            lr,
            momentum_coef,
            checkpoint: init,
            momentum: ParameterVector::zeros(dim),
            raw_prefix: ParameterVector::zeros(dim),
            prev_noise: ParameterVector::zeros(dim),
            tree,
            steps_taken: 0,
        }
    }

    pub fn checkpoint(&self) -> &ParameterVector {
        &self.checkpoint
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    /// Fold one round's aggregate mean update into the noisy prefix sum and
    /// produce the next checkpoint.
    pub fn step(&mut self, mean_update: &ParameterVector) -> Result<ParameterVector, DpFtrlError> {
        if mean_update.dim() != self.checkpoint.dim() {
            return Err(DpFtrlError::DimensionMismatch {
                got: mean_update.dim(),
                expected: self.checkpoint.dim(),
            });
        }
        if self.steps_taken >= self.tree.horizon() {
            return Err(DpFtrlError::HorizonExhausted(self.steps_taken));
        }
        self.steps_taken += 1;
        self.raw_prefix.add_assign(mean_update);
        let noise = self.tree.cumulative_noise(self.steps_taken)?;
        // Noisy increment of the prefix stream drives the momentum update:
        // S~_t - S~_{t-1} = mean_update + (N_t - N_{t-1}). Computing the
        // noise difference directly keeps the z = 0 path bit-identical to
        // plain averaging.
        let mut delta = mean_update.clone();
        for ((d, n), p) in delta.0.iter_mut().zip(&noise.0).zip(&self.prev_noise.0) {
            *d += n - p;
        }
        for (m, d) in self.momentum.0.iter_mut().zip(&delta.0) {
            *m = self.momentum_coef * *m + d;
        }
        for (c, m) in self.checkpoint.0.iter_mut().zip(&self.momentum.0) {
            *c += self.lr * m;
        }
        self.prev_noise = noise;
        Ok(self.checkpoint.clone())
    }
}
