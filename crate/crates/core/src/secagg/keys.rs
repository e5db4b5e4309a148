//! Simulated key agreement and mask expansion.
//!
//! Key agreement runs Diffie-Hellman over the multiplicative group mod
//! p = 2^61 - 1 with generator 7. The group is far too small to be secure —
//! this is a simulation-grade stand-in whose value is that both endpoints of
//! a pair derive the same 128-bit seed deterministically, and that a dropped
//! client's pairwise masks can be recomputed from its reconstructed secret
//! key. NOT SECURE FOR PRODUCTION.

use super::{ClientIndex, SecAggError};
use crate::rng::{stream_u64, widen_seed, DetRng};

/// Prime shared by Shamir sharing and the simulated DH group: 2^61 - 1.
pub const SHAMIR_PRIME: u64 = (1u64 << 61) - 1;

const DH_GENERATOR: u64 = 7;

#[inline]
fn mul_mod(a: u64, b: u64) -> u64 {
    ((a as u128 * b as u128) % SHAMIR_PRIME as u128) as u64
}

pub(crate) fn pow_mod(mut base: u64, mut exp: u64) -> u64 {
    let mut acc = 1u64;
    base %= SHAMIR_PRIME;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base);
        }
        base = mul_mod(base, base);
        exp >>= 1;
    }
    acc
}

/// A client's key agreement key pair.
#[derive(Debug, Clone)]
pub struct KeyPair {
    pub client: ClientIndex,
    /// Secret exponent, a field element. Shamir-shared as the PAIRWISE_KEY
    /// secret so the server can recompute a dropped client's masks.
    pub secret: u64,
    pub public: u64,
}

/// The advertised half of a key pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PublicKey {
    pub client: ClientIndex,
    pub value: u64,
}

/// 128-bit seed shared by a client pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairwiseSecret(pub u128);

/// Deterministic key generation for `client` from `seed`.
pub fn keygen(client: ClientIndex, seed: u64) -> KeyPair {
    let mut rng = DetRng::new(seed);
    // Exponent in [2, p-2]; avoids the trivial endpoints.
    let secret = 2 + rng.next_below(SHAMIR_PRIME - 3);
    KeyPair { client, secret, public: pow_mod(DH_GENERATOR, secret) }
}

/// Shared secret between `me` and a peer: `peer_public^me.secret` widened to
/// 128 bits via [`widen_seed`]. Symmetric by construction.
pub fn derive_pairwise(me: &KeyPair, peer: &PublicKey) -> Result<PairwiseSecret, SecAggError> {
    if me.client == peer.client {
        return Err(SecAggError::SelfPairing(me.client));
    }
    Ok(PairwiseSecret(widen_seed(pow_mod(peer.value, me.secret))))
}

/// Recompute the pairwise secret of (owner, peer) from the owner's
/// reconstructed secret exponent. Used by the server during unmasking.
pub fn pairwise_from_secret(owner_secret: u64, peer_public: u64) -> PairwiseSecret {
    PairwiseSecret(widen_seed(pow_mod(peer_public, owner_secret)))
}

/// Expand a 128-bit seed into `d` field entries.
///
/// Entry `i` is the low `log2(q)` bits of `stream_u64(seed, i)` — counter =
/// entry index, little-endian extraction, rejection-free because q is a
/// power of two.
pub fn expand_mask(seed: u128, d: usize, q: u64) -> Vec<u64> {
    debug_assert!(q.is_power_of_two());
    let mask = q - 1;
    (0..d).map(|i| stream_u64(seed, i as u64) & mask).collect()
}
