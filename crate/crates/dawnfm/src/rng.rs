//! Seeded, stream-splittable randomness.
//!
//! Every stochastic piece of the pipeline (reference samples, noise
//! injection, batch shuffling, ensemble starts) draws from a
//! [`SeededRng`]. A stream is identified by `(seed, stream id)`; child
//! streams use distinct ChaCha keystreams, so they never overlap and
//! can be handed to parallel workers. State is checkpointable down to
//! the word position.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha12Rng,
}

/// Serializable snapshot of a stream's exact position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    /// A fresh stream derived from the master seed and `stream` id,
    /// independent of this generator's current position.
    pub fn child(&self, stream: u64) -> Self {
        Self::with_stream(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// One standard-normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Tensor of i.i.d. standard-normal values.
    pub fn sample_standard_normal(&mut self, shape: &[usize]) -> Result<Tensor> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(shape_err(format!(
                "normal sample needs positive extents, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.normal()).collect();
        Tensor::new(shape.to_vec(), data)
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        self.inner.random_range(lo..hi)
    }

    pub fn uniform_unit(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.inner);
    }

    pub fn state(&self) -> RngState {
        let pos = self.inner.get_word_pos();
        RngState {
            seed: self.seed,
            stream: self.stream,
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut rng = Self::with_stream(state.seed, state.stream);
        let pos = ((state.word_pos_hi as u128) << 64) | state.word_pos_lo as u128;
        rng.inner.set_word_pos(pos);
        rng
    }
}
