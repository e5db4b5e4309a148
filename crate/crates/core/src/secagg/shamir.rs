//! Shamir secret sharing over a prime field.
//!
//! The protocol uses p = 2^61 - 1 (see [`super::SHAMIR_PRIME`]); the prime is
//! a parameter so tests can hand-check against tiny fields like p = 257.
//! Any t shares reconstruct the secret exactly; any t-1 shares are
//! information-theoretically independent of it.

use super::SecAggError;
use crate::rng::DetRng;

/// One evaluation point of the sharing polynomial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShamirShare {
    /// Evaluation point x, in [1, n].
    pub x: u64,
    /// Polynomial value mod p.
    pub y: u64,
}

#[inline]
fn mul_mod(a: u64, b: u64, p: u64) -> u64 {
    ((a as u128 * b as u128) % p as u128) as u64
}

#[inline]
fn add_mod(a: u64, b: u64, p: u64) -> u64 {
    ((a as u128 + b as u128) % p as u128) as u64
}

#[inline]
fn sub_mod(a: u64, b: u64, p: u64) -> u64 {
    if a >= b {
        a - b
    } else {
        a + (p - b)
    }
}

fn pow_mod(mut base: u64, mut exp: u64, p: u64) -> u64 {
    let mut acc = 1u64;
    base %= p;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, p);
        }
        base = mul_mod(base, base, p);
        exp >>= 1;
    }
    acc
}

/// Modular inverse by Fermat's little theorem (p prime).
fn inv_mod(a: u64, p: u64) -> u64 {
    pow_mod(a, p - 2, p)
}

/// Split `secret` into `n` shares with reconstruction threshold `t`.
///
/// The polynomial has degree t-1 with constant term `secret` and seeded
/// uniform coefficients; shares are evaluations at x = 1..=n.
pub fn shamir_share(
    secret: u64,
    n: u64,
    t: u64,
    prime: u64,
    seed: u64,
) -> Result<Vec<ShamirShare>, SecAggError> {
    if t < 1 || t > n || n >= prime {
        return Err(SecAggError::BadShamirParams(format!(
            "need 1 <= t <= n < p, got t={t}, n={n}, p={prime}"
        )));
    }
    if secret >= prime {
        return Err(SecAggError::BadShamirParams(format!(
            "secret {secret} not reduced mod p={prime}"
        )));
    }
    let mut rng = DetRng::new(seed);
    let mut coeffs = Vec::with_capacity(t as usize);
    coeffs.push(secret);
    for _ in 1..t {
        coeffs.push(rng.next_below(prime));
    }
    let shares = (1..=n)
        .map(|x| {
            // Horner evaluation, highest coefficient first.
            let mut y = 0u64;
            for &c in coeffs.iter().rev() {
                y = add_mod(mul_mod(y, x, prime), c, prime);
            }
            ShamirShare { x, y }
        })
        .collect();
    Ok(shares)
}

/// Reconstruct the secret from at least `t` distinct-index shares by
/// Lagrange interpolation at zero. Uses the first `t` shares given.
pub fn shamir_reconstruct(
    shares: &[ShamirShare],
    t: u64,
    prime: u64,
) -> Result<u64, SecAggError> {
    let mut seen = std::collections::BTreeSet::new();
    for s in shares {
        if !seen.insert(s.x) {
            return Err(SecAggError::DuplicateShareIndex(s.x));
        }
    }
    if (shares.len() as u64) < t {
        return Err(SecAggError::InsufficientShares {
            owner: 0,
            got: shares.len(),
            need: t as usize,
        });
    }
    let used = &shares[..t as usize];
    let mut secret = 0u64;
    for (i, si) in used.iter().enumerate() {
        let mut num = 1u64;
        let mut den = 1u64;
        for (j, sj) in used.iter().enumerate() {
            if i == j {
                continue;
            }
            num = mul_mod(num, sj.x % prime, prime);
            den = mul_mod(den, sub_mod(sj.x % prime, si.x % prime, prime), prime);
        }
        let basis = mul_mod(num, inv_mod(den, prime), prime);
        secret = add_mod(secret, mul_mod(si.y, basis, prime), prime);
    }
    Ok(secret)
}
