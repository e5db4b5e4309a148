//! Distributed DP layer: clip -> scale -> stochastically quantize -> add
//! per-client discrete noise -> modular secure sum -> dequantize.
//!
//! Noise is Skellam(mu, mu) per entry — the difference of two Poisson(mu)
//! draws — which is integer-valued, zero-mean with variance 2*mu, exactly
//! samplable, and infinitely divisible across clients, so the summed noise
//! of n clients is again Skellam with variance 2*n*mu.

use thiserror::Error;

use crate::model::ParameterVector;
use crate::rng::DetRng;
use crate::secagg::FieldSpec;

#[derive(Debug, Error)]
pub enum DdpError {
    #[error("update norm {norm} exceeds clip bound {clip}; clip before quantizing")]
    NormExceedsClip { norm: f64, clip: f64 },
    #[error("headroom violation: {0}")]
    Headroom(String),
    #[error("invalid ddp config: {0}")]
    BadConfig(String),
    #[error("survivor count must be positive")]
    ZeroSurvivors,
    #[error(transparent)]
    Field(#[from] crate::secagg::SecAggError),
}

/// Quantization and noise parameters for the secure-sum wire.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdpConfig {
    /// L2 clip bound in model units.
    pub clip_norm: f64,
    /// Field units per model unit.
    pub scale: f64,
    /// Field bit width (16 or 32).
    pub field_bits: u8,
    /// Per-client Skellam parameter; per-entry noise variance is 2*mu.
    pub noise_mu: f64,
    /// Largest client count a sum may cover; drives the headroom check.
    pub expected_clients: u64,
    /// Smallest client count an aggregate may be released at
    /// (min_aggregation); drives the conservative privacy bound.
    pub min_clients: u64,
}

impl DdpConfig {
    pub fn field(&self, dim: usize) -> Result<FieldSpec, DdpError> {
        Ok(FieldSpec::new(self.field_bits, dim)?)
    }

    /// Worst-case field-unit magnitude one client's entry can contribute:
    /// scale * clip (since ||v||_2 <= C bounds every coordinate), plus 1 for
    /// stochastic rounding, plus a 6-sigma Skellam tail.
    pub fn per_client_bound(&self) -> f64 {
        self.scale * self.clip_norm + 1.0 + 6.0 * (2.0 * self.noise_mu).sqrt()
    }

    /// Reject any configuration whose n-client sum could wrap mod q.
    pub fn validate(&self) -> Result<(), DdpError> {
        if !(self.clip_norm > 0.0) || !self.clip_norm.is_finite() {
            return Err(DdpError::BadConfig(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(DdpError::BadConfig(format!("scale must be positive, got {}", self.scale)));
        }
        if self.noise_mu < 0.0 || !self.noise_mu.is_finite() {
            return Err(DdpError::BadConfig(format!("noise_mu must be >= 0, got {}", self.noise_mu)));
        }
        if self.field_bits != 16 && self.field_bits != 32 {
            return Err(DdpError::BadConfig(format!("field_bits must be 16 or 32, got {}", self.field_bits)));
        }
        if self.expected_clients == 0 || self.min_clients == 0 {
            return Err(DdpError::BadConfig("client counts must be >= 1".into()));
        }
        if self.min_clients > self.expected_clients {
            return Err(DdpError::BadConfig(format!(
                "min_clients {} exceeds expected_clients {}",
                self.min_clients, self.expected_clients
            )));
        }
        let q = (1u64 << self.field_bits) as f64;
        let worst = self.expected_clients as f64 * self.per_client_bound();
        if worst >= q / 2.0 {
            return Err(DdpError::Headroom(format!(
                "{} clients x {:.1} field units per client = {:.1} >= q/2 = {:.1}; \
                 lower ddp.scale, dp.clip_norm or ddp.noise_mu, or widen ddp.field_bits",
                self.expected_clients,
                self.per_client_bound(),
                worst,
                q / 2.0
            )));
        }
        Ok(())
    }
}

/// Integer vector in Z_q as it travels the SecAgg wire.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedVector {
    pub entries: Vec<u64>,
    pub config: DdpConfig,
}

#[inline]
fn encode_centered(z: i64, q: u64) -> u64 {
    (((z as i128 % q as i128) + q as i128) % q as i128) as u64
}

#[inline]
fn decode_centered(e: u64, q: u64) -> i64 {
    if e >= q / 2 {
        (e as i128 - q as i128) as i64
    } else {
        e as i64
    }
}

/// Scale by `cfg.scale` and round stochastically (unbiased): x rounds down
/// with probability ceil(x) - x, up otherwise; integral x is exact. Negative
/// values map to q - |value| (two's-complement style).
pub fn quantize(
    v: &ParameterVector,
    cfg: &DdpConfig,
    seed: u64,
) -> Result<QuantizedVector, DdpError> {
    cfg.validate()?;
    let norm = v.l2_norm();
    if norm > cfg.clip_norm + 1e-9 {
        return Err(DdpError::NormExceedsClip { norm, clip: cfg.clip_norm });
    }
    let q = 1u64 << cfg.field_bits;
    let mut rng = DetRng::new(seed);
    let entries = v
        .0
        .iter()
        .map(|&x| {
            let scaled = cfg.scale * x;
            let floor = scaled.floor();
            let frac = scaled - floor;
            let rounded = if frac > 0.0 && rng.next_f64() < frac {
                floor as i64 + 1
            } else {
                floor as i64
            };
            encode_centered(rounded, q)
        })
        .collect();
    Ok(QuantizedVector { entries, config: *cfg })
}

/// Draw Poisson(mu) exactly via Knuth's product method, in chunks so the
/// running product stays far from underflow at large mu.
fn sample_poisson(rng: &mut DetRng, mu: f64) -> u64 {
    debug_assert!(mu >= 0.0);
    let mut total = 0u64;
    let mut remaining = mu;
    while remaining > 0.0 {
        let chunk = remaining.min(10.0);
        let limit = (-chunk).exp();
        let mut k = 0u64;
        let mut p = 1.0;
        loop {
            k += 1;
            p *= rng.next_f64();
            if p <= limit {
                break;
            }
        }
        total += k - 1;
        remaining -= chunk;
    }
    total
}

/// Skellam(mu, mu): difference of two independent Poisson(mu) draws.
pub fn sample_skellam(rng: &mut DetRng, mu: f64) -> i64 {
    sample_poisson(rng, mu) as i64 - sample_poisson(rng, mu) as i64
}

/// Add independent Skellam(mu, mu) noise to every entry, mod q.
pub fn add_discrete_noise(qv: &QuantizedVector, mu: f64, seed: u64) -> Result<QuantizedVector, DdpError> {
    if mu < 0.0 || !mu.is_finite() {
        return Err(DdpError::BadConfig(format!("noise_mu must be >= 0, got {mu}")));
    }
    if mu == 0.0 {
        return Ok(qv.clone());
    }
    let q = 1u64 << qv.config.field_bits;
    let mut rng = DetRng::new(seed);
    let entries = qv
        .entries
        .iter()
        .map(|&e| {
            let noise = sample_skellam(&mut rng, mu);
            encode_centered(decode_centered(e, q).wrapping_add(noise), q)
        })
        .collect();
    Ok(QuantizedVector { entries, config: qv.config })
}

/// Decode a summed wire vector back to a real mean-update estimate:
/// centered decode, then divide by scale * survivor count.
pub fn dequantize_sum(
    sum_entries: &[u64],
    survivor_count: u64,
    cfg: &DdpConfig,
) -> Result<ParameterVector, DdpError> {
    if survivor_count == 0 {
        return Err(DdpError::ZeroSurvivors);
    }
    let q = 1u64 << cfg.field_bits;
    let denom = cfg.scale * survivor_count as f64;
    Ok(ParameterVector(
        sum_entries.iter().map(|&e| decode_centered(e, q) as f64 / denom).collect(),
    ))
}

/// Conservative per-round zCDP contribution of the distributed noise,
/// by Gaussian approximation: rho = (s*C)^2 / (2 * sigma_total^2) with
/// sigma_total^2 = 2 * mu * min_clients. Looser than exact Skellam
/// accounting, never tighter. mu = 0 returns the infinity sentinel: the
/// distributed layer alone then promises nothing (legal when a central
/// mechanism provides the guarantee).
pub fn ddp_zcdp_contribution(cfg: &DdpConfig) -> f64 {
    if cfg.noise_mu == 0.0 {
        return f64::INFINITY;
    }
    let sensitivity = cfg.scale * cfg.clip_norm;
    let sigma_sq = 2.0 * cfg.noise_mu * cfg.min_clients as f64;
    sensitivity * sensitivity / (2.0 * sigma_sq)
}
