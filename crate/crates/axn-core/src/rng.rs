//! Seeded randomness helpers.
//!
//! Every random quantity in the crate flows from an explicit `u64` seed
//! through either a [`ChaCha8Rng`] stream (initialization, shuffles,
//! sampling) or the counter-based [`counter_normal`] generator (synthetic
//! noise addressable by coordinate without materializing a matrix). Both are
//! stable across runs and platforms; transcendental functions go through
//! `libm` so the streams do not depend on the system math library.

use rand_core::RngCore;

use rand_chacha::rand_core::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// Stream RNG for a given seed.
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draw a fresh sub-seed from a stream.
pub fn next_seed(rng: &mut ChaCha8Rng) -> u64 {
    rng.next_u64()
}

/// Derive a sub-seed for a named stage from a master seed.
///
/// Equal `(master, label)` pairs always map to the same seed; distinct
/// labels decorrelate the per-stage streams.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = fnv1a64(label.as_bytes());
    h ^= master;
    splitmix64(h)
}

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer; bijective on u64.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform f64 in [0, 1) from a raw u64.
fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform f64 in (0, 1] from a raw u64 (safe as a log argument).
fn unit_f64_open_low(bits: u64) -> f64 {
    ((bits >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform f64 in [lo, hi).
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit_f64(rng.next_u64())
}

/// Uniform usize in [0, n) without modulo bias.
pub fn uniform_usize(rng: &mut ChaCha8Rng, n: usize) -> usize {
    assert!(n > 0);
    let n = n as u64;
    // rejection sampling on the top range
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return (v % n) as usize;
        }
    }
}

/// Standard normal via Box-Muller.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = unit_f64_open_low(rng.next_u64());
    let u2 = unit_f64(rng.next_u64());
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
}

/// Vector of standard normals.
pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, xs: &mut [T]) {
    for i in (1..xs.len()).rev() {
        let j = uniform_usize(rng, i + 1);
        xs.swap(i, j);
    }
}

/// Sample `k` distinct values from `0..n` (k <= n), in random order.
pub fn sample_without_replacement(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n);
    // Partial Fisher-Yates over a dense index vector. Fine at the corpus
    // sizes this crate targets; no reservoir needed.
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + uniform_usize(rng, n - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Standard normal addressable by (seed, row, col).
///
/// Counter-based: the value is a pure function of its coordinates, so a
/// full noise matrix never has to be materialized and lookups are
/// order-independent.
pub fn counter_normal(seed: u64, row: usize, col: usize) -> f64 {
    let k1 = splitmix64(seed ^ splitmix64(row as u64 ^ 0x517c_c1b7_2722_0a95));
    let k2 = splitmix64(k1 ^ splitmix64(col as u64 ^ 0x2545_f491_4f6c_dd1d));
    let u1 = unit_f64_open_low(splitmix64(k2));
    let u2 = unit_f64(splitmix64(k2 ^ 0x9e37_79b9_7f4a_7c15));
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
}
