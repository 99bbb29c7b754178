//! Deterministic random streams.
//!
//! Every stochastic choice in the crate draws from a ChaCha8 stream derived
//! from (root seed, purpose tag, indices). Derivation is stateless, so a run
//! resumed at any epoch boundary replays the exact same draws as an
//! uninterrupted run.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// splitmix64 finalizer; decorrelates nearby seed inputs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed, a purpose tag, and up to two indices.
pub fn derive(seed: u64, tag: &str, a: u64, b: u64) -> u64 {
    let mut h = mix(seed);
    for &byte in tag.as_bytes() {
        h = mix(h ^ byte as u64);
    }
    mix(mix(h ^ a) ^ b)
}

/// A seeded ChaCha8 stream for the given derivation.
pub fn stream(seed: u64, tag: &str, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag, a, b))
}

/// Uniform f64 in [0, 1).
pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform f64 in [lo, hi).
pub fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform(rng)
}

/// Standard normal via Box-Muller.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = loop {
        let u = uniform(rng);
        if u > 0.0 {
            break u;
        }
    };
    let u2 = uniform(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform integer in [0, n). n must be positive.
pub fn below(rng: &mut ChaCha8Rng, n: usize) -> usize {
    (rng.next_u64() % n as u64) as usize
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}

/// k distinct indices sampled without replacement from [0, n), in draw order.
pub fn sample_without_replacement(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    debug_assert!(k <= n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + below(rng, n - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}
