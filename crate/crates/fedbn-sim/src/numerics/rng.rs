//! Deterministic random number generation.
//!
//! Every logical actor (client, sampler, Monte-Carlo estimator) owns its own
//! stream derived from `(seed, stream_id)`, so concurrent execution cannot
//! reorder draws. The backing generator is counter-based ChaCha8: identical
//! seed and call sequence always reproduce the identical output stream.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Seeded random stream. Single-owner by convention: one stream per actor.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
    stream_id: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::for_stream(seed, 0)
    }

    /// Independent stream for `(seed, stream_id)`; used to give each client
    /// its own generator.
    pub fn for_stream(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            inner,
            seed,
            stream_id,
        }
    }

    pub fn for_client(seed: u64, client_id: usize) -> Self {
        // stream 0 is reserved for the orchestrator
        Self::for_stream(seed, client_id as u64 + 1)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in [0, 1) with 53 random mantissa bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Multiply-shift trick; the O(n/2^64) bias is
    /// irrelevant at the sizes used here.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    /// Standard normal via Box-Muller (no caching, two uniforms per draw).
    pub fn standard_normal(&mut self) -> f64 {
        loop {
            let u1 = self.uniform();
            if u1 > 0.0 {
                let u2 = self.uniform();
                let r = (-2.0 * u1.ln()).sqrt();
                return r * (2.0 * std::f64::consts::PI * u2).cos();
            }
        }
    }

    /// Uniform draw from {-1, +1}.
    pub fn pm_one(&mut self) -> f64 {
        if self.next_u64() & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
