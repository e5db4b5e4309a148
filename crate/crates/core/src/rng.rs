//! Deterministic pseudorandomness for the whole simulator.
//!
//! Every random choice in the pipeline — model init, client shuffles, cohort
//! sampling, dropout draws, masks, discrete noise — is derived from a single
//! master seed through the functions here, so a full experiment replays
//! bit-identically. The constructions are documented exactly because wire
//! values (mask streams) and output artifacts (metrics, checkpoints) are
//! compared byte-for-byte in tests.
//!
//! None of this is cryptographic. See the crate README.

/// 64-bit avalanche mix (the SplitMix64 finalizer).
///
/// `mix64(x) = f(g(f(x ^ (x >> 30)))), ...` — precisely:
/// x ^= x >> 30; x *= 0xbf58476d1ce4e5b9;
/// x ^= x >> 27; x *= 0x94d049bb133111eb;
/// x ^= x >> 31.
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    x
}

/// Golden-ratio increment used by SplitMix64.
pub const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// Counter-mode stream over a 128-bit seed.
///
/// Entry `counter` of the stream keyed by `seed` is, bit-exactly:
///
/// ```text
/// lo = seed as u64                 (little end of the seed)
/// hi = (seed >> 64) as u64
/// stream_u64 = mix64( mix64( lo ^ (counter+1)*GOLDEN_GAMMA ) .wrapping_add(hi) )
/// ```
///
/// Mask expansion and all per-entry draws use this stream with
/// `counter = entry index`, so vectors of any length agree on their common
/// prefix and can be generated out of order or in parallel.
#[inline]
pub fn stream_u64(seed: u128, counter: u64) -> u64 {
    let lo = seed as u64;
    let hi = (seed >> 64) as u64;
    mix64(mix64(lo ^ counter.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)).wrapping_add(hi))
}

/// Child-seed derivation: `hash(master, role-label, index)`.
///
/// Bit-exact definition: FNV-1a (64-bit, offset 0xcbf29ce484222325,
/// prime 0x100000001b3) over the label bytes gives `l`; the result is
/// `mix64( mix64(master ^ l) ^ index.wrapping_mul(GOLDEN_GAMMA) )`.
///
/// Distinct labels give independent streams for the same master seed, so
/// e.g. cohort sampling in round 7 and dropout draws in round 7 never share
/// randomness.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut l: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in label.as_bytes() {
        l ^= b as u64;
        l = l.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(mix64(master ^ l) ^ index.wrapping_mul(GOLDEN_GAMMA))
}

/// Widen a 64-bit seed to the 128-bit form used by counter streams.
///
/// `lo = mix64(seed ^ 0x243f6a8885a308d3)`, `hi = mix64(seed ^ 0x13198a2e03707344)`
/// (the first two pi-fraction constants), packed little end first.
pub fn widen_seed(seed: u64) -> u128 {
    let lo = mix64(seed ^ 0x243f_6a88_85a3_08d3);
    let hi = mix64(seed ^ 0x1319_8a2e_0370_7344);
    (lo as u128) | ((hi as u128) << 64)
}

/// Sequential deterministic generator (SplitMix64).
#[derive(Debug, Clone)]
pub struct DetRng {
    state: u64,
    gauss_spare: Option<f64>,
}

impl DetRng {
    pub fn new(seed: u64) -> Self {
        DetRng { state: seed, gauss_spare: None }
    }

    /// Child generator with an independent stream.
    pub fn fork(&mut self, label: &str, index: u64) -> DetRng {
        DetRng::new(derive_seed(self.next_u64(), label, index))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer below `bound` via 128-bit widening multiply.
    ///
    /// Bias is below 2^-64, far under anything our statistical tests can see.
    #[inline]
    pub fn next_below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }

    /// Standard normal via Box-Muller; draws two uniforms per pair and
    /// caches the second value.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.gauss_spare.take() {
            return z;
        }
        // u1 in (0, 1] so ln is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.gauss_spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Sample `k` distinct indices from `0..n`, in selection order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.next_below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_is_deterministic_and_seed_sensitive() {
        let a: Vec<u64> = (0..8).map(|i| stream_u64(1, i)).collect();
        let b: Vec<u64> = (0..8).map(|i| stream_u64(1, i)).collect();
        let c: Vec<u64> = (0..8).map(|i| stream_u64(2, i)).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn derive_seed_separates_labels_and_indices() {
        let s1 = derive_seed(42, "cohort", 1);
        let s2 = derive_seed(42, "dropout", 1);
        let s3 = derive_seed(42, "cohort", 2);
        assert_ne!(s1, s2);
        assert_ne!(s1, s3);
        assert_eq!(s1, derive_seed(42, "cohort", 1));
    }

    #[test]
    fn uniform_f64_moments() {
        let mut rng = DetRng::new(7);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| rng.next_f64()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = DetRng::new(11);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.next_gaussian()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn sample_indices_are_distinct() {
        let mut rng = DetRng::new(3);
        for _ in 0..100 {
            let picked = rng.sample_indices(20, 10);
            let mut sorted = picked.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 10);
        }
    }
}
