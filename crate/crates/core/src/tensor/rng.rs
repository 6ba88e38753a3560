//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator keyed by a 64-bit seed and a 64-bit
//! stream id. ChaCha is counter based, so the sequence for a given
//! `(seed, stream)` pair is identical on every platform. Normal deviates use
//! the ziggurat sampler of `rand_distr`.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    /// Independent stream `stream` under `seed`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng { inner }
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in `[lo, hi]`; returns `lo` when the range is degenerate.
    pub fn uniform_f64(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            lo
        } else {
            lo + (hi - lo) * self.next_f64()
        }
    }

    /// Uniform integer in `0..n` (`n > 0`).
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn coin(&mut self) -> bool {
        self.inner.random::<bool>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn gaussian(&mut self, mu: f64, sigma: f64, shape: &[usize]) -> Result<Tensor> {
        if !(sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be ≥ 0, got {sigma}")));
        }
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| mu + sigma * self.normal()).collect();
        Tensor::new(shape.to_vec(), data)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64, shape: &[usize]) -> Result<Tensor> {
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!("uniform range [{lo}, {hi}] is empty")));
        }
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.uniform_f64(lo, hi)).collect();
        Tensor::new(shape.to_vec(), data)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
