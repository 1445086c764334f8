//! Seeded random number generation with checkpointable state.
//!
//! Wraps the ChaCha8 stream cipher generator: fast, portable across
//! platforms, and its position in the stream is a single 128-bit counter,
//! which makes saving and restoring mid-run state trivial.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Identifier stored in checkpoints so a restore can reject state written
/// by a different generator.
pub const RNG_ALGORITHM: &str = "chacha8";

/// Serializable generator state: the original seed plus the stream
/// position (a u128, carried as a decimal string to stay JSON-safe).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    pub word_pos: String,
}

/// Deterministic random source for init, data generation, and shuffling.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Captures the full state for a checkpoint.
    pub fn state(&self) -> RngState {
        RngState {
            algorithm: RNG_ALGORITHM.to_string(),
            seed: self.seed,
            word_pos: self.inner.get_word_pos().to_string(),
        }
    }

    /// Rebuilds a generator resuming exactly where `state` left off.
    pub fn from_state(state: &RngState) -> Result<Self, String> {
        if state.algorithm != RNG_ALGORITHM {
            return Err(format!(
                "rng state written by '{}', this build uses '{RNG_ALGORITHM}'",
                state.algorithm
            ));
        }
        let pos: u128 = state
            .word_pos
            .parse()
            .map_err(|_| format!("bad rng word position '{}'", state.word_pos))?;
        let mut inner = ChaCha8Rng::seed_from_u64(state.seed);
        inner.set_word_pos(pos);
        Ok(Rng {
            inner,
            seed: state.seed,
        })
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            xs.swap(i, j);
        }
    }

    /// Tensor of uniform draws in [lo, hi), filled in row-major order.
    pub fn rand_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.uniform(lo, hi)).collect();
        Tensor::new(shape, data).expect("uniform draws are finite")
    }

    /// Tensor of standard normal draws, filled in row-major order.
    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.normal()).collect();
        Tensor::new(shape, data).expect("normal draws are finite")
    }
}
