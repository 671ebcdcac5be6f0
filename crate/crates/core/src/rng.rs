//! Seeded, platform-independent random streams.
//!
//! Every random draw in the crate goes through [`RngState`], a ChaCha8
//! generator addressed by `(seed, stream)`. Distinct concerns of one run
//! (adapter init, batch sampling, ...) use distinct streams so that turning
//! a mechanism on or off never shifts the draws of another.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const ALGORITHM: &str = "chacha8";

/// Well-known stream ids.
pub mod streams {
    pub const BACKBONE_INIT: u64 = 1;
    pub const LORA_INIT: u64 = 2;
    pub const RECOVERY_INIT: u64 = 3;
    pub const BATCHES: u64 = 4;
    pub const DATA_PRETRAIN: u64 = 10;
    pub const DATA_TRAIN: u64 = 11;
    pub const DATA_EVAL: u64 = 12;
    pub const MIXTURE: u64 = 13;
    pub const KMEANS: u64 = 20;
    pub const ROUTER: u64 = 21;
    pub const EXTRA_LORA_INIT: u64 = 22;
}

#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn algorithm(&self) -> &'static str {
        ALGORITHM
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n as u64) as usize
    }

    /// Uniform float in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
