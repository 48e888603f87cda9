//! Seeded, counter-based random streams.
//!
//! Every consumer derives its own stream from a root seed and a path of tags
//! (epoch, sample index, view index, ...), so the draws a sample receives do
//! not depend on how many workers produced the batch or in which order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Position in the underlying ChaCha block stream (counts 32-bit words).
    pub fn position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Independent child stream; depends only on this stream's seed and `tag`.
    pub fn fork(&self, tag: u64) -> Self {
        RngState::new(mix(self.seed ^ mix(tag.wrapping_add(0x5157_5654))))
    }

    pub fn fork_path(&self, tags: &[u64]) -> Self {
        tags.iter().fold(self.clone(), |r, &t| r.fork(t))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        p > 0.0 && self.uniform() < p
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        Normal::new(mean, std)
            .expect("standard deviation is finite and non-negative")
            .sample(&mut self.inner)
    }

    /// `N(0, std²)` resampled until it lies within `±bound`.
    pub fn truncated_normal(&mut self, std: f64, bound: f64) -> f64 {
        loop {
            let v = self.normal(0.0, std);
            if v.abs() <= bound {
                return v;
            }
        }
    }

    pub fn beta(&mut self, alpha: f64) -> f64 {
        Beta::new(alpha, alpha)
            .expect("alpha is positive")
            .sample(&mut self.inner)
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}
