//! Secure aggregation against an honest-but-curious server.
//!
//! The server learns only the modular sum of surviving clients' integer
//! vectors. Pairwise masks cancel between neighbor pairs, per-client self
//! masks cover late dropouts (double masking), and Shamir shares of the two
//! secret kinds make the protocol dropout tolerant: for a dropped client the
//! server may recover its pairwise key, for a survivor only its self-mask
//! seed, never both.
//!
//! Key agreement here is a seeded simulation-grade construction over a
//! 61-bit group. It is documented bit-exactly so protocol runs replay, and
//! it is NOT SECURE FOR PRODUCTION; the artifact's contract is protocol
//! correctness and the information-flow structure.

mod graph;
mod keys;
mod session;
mod shamir;

pub use graph::{build_topology, CommGraph};
pub use keys::{derive_pairwise, expand_mask, keygen, KeyPair, PairwiseSecret, PublicKey, SHAMIR_PRIME};
pub use session::{
    mask_update, run_secagg, DropoutSchedule, Phase, SecAggClient, SecAggOutcome, SecAggSession,
    SecretKind, SecretShare, Transcript, TranscriptEntry,
};
pub use shamir::{shamir_reconstruct, shamir_share, ShamirShare};

use thiserror::Error;

/// Index of a client within one protocol cohort.
pub type ClientIndex = usize;

#[derive(Debug, Error)]
pub enum SecAggError {
    #[error("field bit width must be 16 or 32, got {0}")]
    BadFieldBits(u8),
    #[error("client cannot pair with itself (id {0})")]
    SelfPairing(ClientIndex),
    #[error("shamir parameters invalid: {0}")]
    BadShamirParams(String),
    #[error("duplicate share index {0}")]
    DuplicateShareIndex(u64),
    #[error("insufficient shares for client {owner}: got {got}, need {need}")]
    InsufficientShares { owner: ClientIndex, got: usize, need: usize },
    #[error("both share kinds revealed for client {owner}: protocol violation")]
    BothKindsRevealed { owner: ClientIndex },
    #[error("share of wrong kind revealed for client {owner}")]
    WrongShareKind { owner: ClientIndex },
    #[error("client {client} is missing the pairwise secret for neighbor {neighbor}")]
    MissingNeighborSecret { client: ClientIndex, neighbor: ClientIndex },
    #[error("message for phase {expected:?} arrived while session is in {actual:?}")]
    PhaseViolation { expected: Phase, actual: Phase },
    #[error("only {survivors} masked inputs arrived, threshold is {threshold}")]
    ThresholdNotMet { survivors: usize, threshold: usize },
    #[error("graph is infeasible: degree k={k} below threshold t={t}")]
    InfeasibleGraph { k: usize, t: usize },
    #[error("graph parameters invalid: {0}")]
    BadGraphParams(String),
    #[error("no connected graph found after {0} attempts")]
    DisconnectedAfterRetries(u32),
    #[error("input entry {value} is outside the field (q = {q})")]
    InputOutOfField { value: u64, q: u64 },
    #[error("input vector has length {got}, field dimension is {expected}")]
    BadInputDimension { got: usize, expected: usize },
    #[error("unknown client index {0} for this session")]
    UnknownClient(ClientIndex),
    #[error("no input vector supplied for live client {0}")]
    MissingInput(ClientIndex),
}

/// Integer domain for wire vectors: modulus q = 2^bits, bits in {16, 32}.
///
/// Powers of two keep mask expansion rejection-free (take the low bits of a
/// 64-bit stream word) and make modular reduction a bitmask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldSpec {
    bits: u8,
    pub dim: usize,
}

impl FieldSpec {
    pub fn new(bits: u8, dim: usize) -> Result<Self, SecAggError> {
        if bits != 16 && bits != 32 {
            return Err(SecAggError::BadFieldBits(bits));
        }
        Ok(FieldSpec { bits, dim })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn q(&self) -> u64 {
        1u64 << self.bits
    }

    #[inline]
    pub fn mask(&self) -> u64 {
        self.q() - 1
    }

    #[inline]
    pub fn add(&self, a: u64, b: u64) -> u64 {
        a.wrapping_add(b) & self.mask()
    }

    #[inline]
    pub fn sub(&self, a: u64, b: u64) -> u64 {
        a.wrapping_sub(b) & self.mask()
    }

    pub fn add_assign_vec(&self, acc: &mut [u64], rhs: &[u64]) {
        for (a, b) in acc.iter_mut().zip(rhs) {
            *a = self.add(*a, *b);
        }
    }

    pub fn sub_assign_vec(&self, acc: &mut [u64], rhs: &[u64]) {
        for (a, b) in acc.iter_mut().zip(rhs) {
            *a = self.sub(*a, *b);
        }
    }

    pub fn check_vec(&self, v: &[u64]) -> Result<(), SecAggError> {
        if v.len() != self.dim {
            return Err(SecAggError::BadInputDimension { got: v.len(), expected: self.dim });
        }
        for &x in v {
            if x > self.mask() {
                return Err(SecAggError::InputOutOfField { value: x, q: self.q() });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_arithmetic_wraps() {
        let f = FieldSpec::new(16, 1).unwrap();
        assert_eq!(f.q(), 65536);
        assert_eq!(f.add(65535, 1), 0);
        assert_eq!(f.sub(0, 1), 65535);
        assert!(FieldSpec::new(8, 1).is_err());
    }
}
