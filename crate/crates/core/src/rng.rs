//! Seeded pseudo-random source shared by every stochastic component.
//!
//! The stream is ChaCha8 (as implemented by `rand_chacha`) seeded through
//! `SeedableRng::seed_from_u64`. All derived draws (bounded integers, unit
//! floats, normals, shuffles) are implemented here so their exact algorithms
//! stay fixed regardless of upstream sampling changes:
//!
//! * `below(n)`: 64-bit rejection sampling, discarding draws `>= 2^64 - (2^64 mod n)`
//!   and returning `draw mod n`.
//! * `unit_f64()`: top 53 bits of one draw scaled by `2^-53`.
//! * `normal()`: Box-Muller on two `unit_f64` draws (cosine branch only).
//! * `shuffle()`: Fisher-Yates from the last index down.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Name of the generator recorded in dataset sidecars and run configs.
pub const RNG_ALGORITHM: &str = "chacha8-seed_from_u64/reject64/fisher-yates";

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Self { inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent stream derived from `seed` and a stream label.
    pub fn derived(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "empty range");
        let zone = u64::MAX - (u64::MAX % n + 1) % n;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return x % n;
            }
        }
    }

    /// Uniform integer in the inclusive interval `[lo, hi]`.
    pub fn between(&mut self, lo: u64, hi: u64) -> u64 {
        assert!(lo <= hi, "inverted range");
        if lo == 0 && hi == u64::MAX {
            return self.next_u64();
        }
        lo + self.below(hi - lo + 1)
    }

    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit_f64()
    }

    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] keeps the logarithm finite
        let u1 = 1.0 - self.unit_f64();
        let u2 = self.unit_f64();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
