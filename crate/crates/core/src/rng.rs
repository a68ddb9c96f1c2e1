//! Portable, seedable random source.
//!
//! The generator is xoshiro256** seeded through SplitMix64 (the reference
//! seeding procedure of the xoshiro family), so a given seed yields the same
//! stream in any language that implements those two published algorithms:
//!
//! - SplitMix64: `state += 0x9E3779B97F4A7C15`; output mixes with
//!   `0xBF58476D1CE4E5B9` and `0x94D049BB133111EB`.
//! - xoshiro256**: output `rotl(s1 * 5, 7) * 9`.
//!
//! Uniform reals take the top 53 bits of a draw; normals use the basic
//! Box-Muller transform (one normal per pair of uniforms, the sine branch is
//! discarded) so the mapping from stream to samples stays trivial to port.

use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

#[derive(Clone, Debug)]
pub struct PortableRng {
    inner: Xoshiro256StarStar,
}

impl PortableRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    /// Derive an independent stream for a named purpose from a parent seed.
    pub fn derived(seed: u64, stream: u64) -> Self {
        Self::new(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). Uses the multiply-high reduction.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn normal(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
