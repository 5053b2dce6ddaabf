//! Deterministic random streams.
//!
//! Every random decision in the crate draws from a xoshiro256** generator
//! seeded through SplitMix64 (`seed_from_u64`). Independent streams are
//! derived from a base seed and a string key so that adding or reordering
//! consumers never shifts another stream.

use rand::RngExt;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

use crate::tensor::Tensor;

/// FNV-1a 64-bit hash of a key string.
fn fnv1a(key: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in key.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive an independent stream from a base seed and a label.
pub fn stream(seed: u64, key: &str) -> Xoshiro256StarStar {
    Xoshiro256StarStar::seed_from_u64(seed ^ fnv1a(key))
}

/// Per-record stream: `seed ^ index`, decorrelated by the seeding SplitMix64.
pub fn record_stream(seed: u64, index: u64) -> Xoshiro256StarStar {
    Xoshiro256StarStar::seed_from_u64(seed ^ index)
}

pub fn uniform_tensor(
    rng: &mut Xoshiro256StarStar,
    shape: &[usize],
    lo: f64,
    hi: f64,
) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    Tensor::from_vec(shape, data)
}

/// He-style normal init: N(0, sqrt(2 / fan_in)).
pub fn he_normal_tensor(rng: &mut Xoshiro256StarStar, shape: &[usize], fan_in: usize) -> Tensor {
    use rand_distr::Distribution;
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = rand_distr::Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::from_vec(shape, data)
}
