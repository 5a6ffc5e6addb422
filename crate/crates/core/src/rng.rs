//! Deterministic randomness.
//!
//! Every stochastic component draws from its own ChaCha12 stream derived from
//! the single master seed and a component label, so adding randomness to one
//! place (say, augmentation) never shifts the draws of another (say, parameter
//! init), and per-fold streams stay independent.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::tensor::Real;

/// Derive a component seed: FNV-1a hash of the label, XORed with the master
/// seed. Stable across runs and platforms.
pub fn stream_seed(master: u64, label: &str) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h ^ master
}

pub fn seeded_rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

pub fn component_rng(master: u64, label: &str) -> ChaCha12Rng {
    seeded_rng(stream_seed(master, label))
}

/// `n` draws, uniform in `[lo, hi)`.
pub fn uniform_vec<F: Real>(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<F> {
    (0..n)
        .map(|_| F::from_f64(rng.random_range(lo..hi)))
        .collect()
}
