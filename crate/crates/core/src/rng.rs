//! Labeled, counter-based random streams.
//!
//! Every consumer of randomness (weight init, shuffling, GIN draws, cohort
//! synthesis, fold assignment) pulls from its own stream derived from one
//! master seed and a textual label. Streams never share state, so the order
//! in which folds or jobs run cannot change any draw.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    label: String,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, label: impl Into<String>) -> Self {
        let label = label.into();
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(label.as_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        Self {
            seed,
            label,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    /// Child stream `"<label>/<sub>"` of the same master seed. Independent of
    /// how many draws the parent has made.
    pub fn derive(&self, sub: impl AsRef<str>) -> Self {
        Self::new(self.seed, format!("{}/{}", self.label, sub.as_ref()))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Uniform draw on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}
