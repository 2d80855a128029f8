//! Seeded random number generation.
//!
//! [`Rng`] wraps ChaCha8 (seeded through `seed_from_u64`), whose output stream
//! is fixed by its published algorithm and therefore identical across runs and
//! platforms. Gaussian variates use the Box–Muller transform and consume
//! exactly two 64-bit words each; the sine branch is discarded so that every
//! draw depends only on the stream position.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below called with n = 0");
        // Lemire's multiply-shift; the bias is < n / 2^64 and irrelevant here.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal variate via Box–Muller (cosine branch).
    pub fn gaussian(&mut self) -> f64 {
        // u1 in (0, 1] so that ln(u1) is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// A fresh generator whose seed is `base ^ stable_hash(tag)`.
    pub fn derived(base: u64, tag: &str) -> Self {
        Self::new(derive_seed(base, tag))
    }
}

/// Stable 64-bit hash: the first eight bytes of SHA-256, little endian.
pub fn stable_hash(data: &[u8]) -> u64 {
    let digest = Sha256::digest(data);
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Per-item seed derivation: `global_seed ^ stable_hash(tag)`.
pub fn derive_seed(global_seed: u64, tag: &str) -> u64 {
    global_seed ^ stable_hash(tag.as_bytes())
}
