//! Property-based invariants from the module contracts.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use fedsim::ddp::{dequantize_sum, quantize, DdpConfig};
use fedsim::model::{clip_update, ParameterVector};
use fedsim::secagg::{
    run_secagg, shamir_reconstruct, shamir_share, CommGraph, DropoutSchedule, FieldSpec,
    SHAMIR_PRIME,
};

proptest! {
    /// Clipping bounds the norm, preserves direction, and is idempotent.
    #[test]
    fn clip_invariants(
        values in proptest::collection::vec(-100.0f64..100.0, 1..1000),
        clip in 0.01f64..10.0,
    ) {
        let delta = ParameterVector(values);
        let clipped = clip_update(&delta, clip).unwrap();
        prop_assert!(clipped.l2_norm() <= clip + 1e-9);
        let norm = delta.l2_norm();
        if norm > 1e-9 {
            let dot: f64 = clipped.0.iter().zip(&delta.0).map(|(a, b)| a * b).sum();
            let cos = dot / (clipped.l2_norm() * norm).max(1e-300);
            prop_assert!((cos - 1.0).abs() < 1e-9, "cosine {cos}");
        }
        let again = clip_update(&clipped, clip).unwrap();
        prop_assert_eq!(again, clipped);
    }

    /// Quantize-then-dequantize of a single update stays within 1/scale per
    /// entry (mu = 0, one client).
    #[test]
    fn quantize_roundtrip_bound(
        values in proptest::collection::vec(-0.3f64..0.3, 1..64),
        seed in any::<u64>(),
    ) {
        let cfg = DdpConfig {
            clip_norm: 4.0,
            scale: 256.0,
            field_bits: 32,
            noise_mu: 0.0,
            expected_clients: 1,
            min_clients: 1,
        };
        let v = ParameterVector(values);
        prop_assume!(v.l2_norm() <= cfg.clip_norm);
        let qv = quantize(&v, &cfg, seed).unwrap();
        let back = dequantize_sum(&qv.entries, 1, &cfg).unwrap();
        prop_assert!(back.linf_distance(&v) <= 1.0 / cfg.scale + 1e-12);
    }

    /// Any t of n Shamir shares reconstruct the secret exactly over the
    /// production prime.
    #[test]
    fn shamir_roundtrip(
        secret in 0u64..SHAMIR_PRIME,
        n in 2u64..12,
        t_offset in 0u64..11,
        seed in any::<u64>(),
        subset_seed in any::<u64>(),
    ) {
        let t = 1 + t_offset % n;
        let shares = shamir_share(secret, n, t, SHAMIR_PRIME, seed).unwrap();
        // A pseudo-random t-subset.
        let mut rng = fedsim::rng::DetRng::new(subset_seed);
        let idx = rng.sample_indices(n as usize, t as usize);
        let subset: Vec<_> = idx.into_iter().map(|i| shares[i]).collect();
        prop_assert_eq!(shamir_reconstruct(&subset, t, SHAMIR_PRIME).unwrap(), secret);
    }

    /// The headroom validator rejects exactly the configurations whose
    /// worst-case 6-sigma sum can reach q/2.
    #[test]
    fn headroom_validator_tracks_the_boundary(
        clip in 0.1f64..4.0,
        scale_log2 in 1u32..20,
        mu in 0.0f64..16.0,
        clients in 1u64..2000,
        bits in prop::sample::select(vec![16u8, 32u8]),
    ) {
        let cfg = DdpConfig {
            clip_norm: clip,
            scale: (1u64 << scale_log2) as f64,
            field_bits: bits,
            noise_mu: mu,
            expected_clients: clients,
            min_clients: 1,
        };
        let q = (1u64 << bits) as f64;
        let wraps = clients as f64 * (cfg.scale * clip + 1.0 + 6.0 * (2.0 * mu).sqrt()) >= q / 2.0;
        prop_assert_eq!(cfg.validate().is_err(), wraps);
    }

    /// Protocol correctness on small random instances: the unmasked sum
    /// equals the survivors' plaintext sum mod q. (The acceptance suite runs
    /// the large randomized version; this one shrinks on failure.)
    #[test]
    fn secagg_sum_matches_plaintext(
        n in 3usize..8,
        drop_mask in any::<u8>(),
        seed in any::<u64>(),
        d in 1usize..5,
    ) {
        let t = 2;
        let field = FieldSpec::new(16, d).unwrap();
        let graph = CommGraph::complete(n);
        let mut rng = fedsim::rng::DetRng::new(seed);
        let inputs: BTreeMap<usize, Vec<u64>> = (0..n)
            .map(|i| (i, (0..d).map(|_| rng.next_below(field.q())).collect()))
            .collect();
        // Drop at most n - t clients after SHARE_KEYS.
        let mut dropped = BTreeSet::new();
        for i in 0..n {
            if drop_mask & (1 << i) != 0 && dropped.len() < n - t {
                dropped.insert(i);
            }
        }
        let schedule = DropoutSchedule { after_share_keys: dropped.clone(), ..Default::default() };
        let outcome = run_secagg(1, &field, &graph, t, &inputs, &schedule, seed).unwrap();
        let mut oracle = vec![0u64; d];
        for i in (0..n).filter(|i| !dropped.contains(i)) {
            field.add_assign_vec(&mut oracle, &inputs[&i]);
        }
        prop_assert_eq!(outcome.sum, oracle);
    }
}
