use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::num::tensor::Tensor;

/// Single model-wide PRNG. All initializers and sampling draw from it in
/// creation order, so a (seed, word position) pair pins the full state.
#[derive(Clone, Debug)]
pub struct ModelRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl ModelRng {
    pub fn new(seed: u64) -> Self {
        ModelRng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn restore(seed: u64, word_pos: u128) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_word_pos(word_pos);
        ModelRng { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.gen::<f64>() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1: f64 = self.inner.gen_range(f64::EPSILON..1.0);
        let u2: f64 = self.inner.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn uniform_tensor(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
        let data = (0..rows * cols).map(|_| self.uniform(lo, hi)).collect();
        Tensor::new(rows, cols, data).unwrap()
    }

    pub fn normal_tensor(&mut self, rows: usize, cols: usize, std: f64) -> Tensor {
        let data = (0..rows * cols).map(|_| self.normal() * std).collect();
        Tensor::new(rows, cols, data).unwrap()
    }

    /// Glorot-style uniform init for a rows x cols projection.
    pub fn xavier_tensor(&mut self, rows: usize, cols: usize) -> Tensor {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        self.uniform_tensor(rows, cols, -bound, bound)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            xs.swap(i, j);
        }
    }

    /// k distinct indices from 0..n, in draw order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut pool: Vec<usize> = (0..n).collect();
        self.shuffle(&mut pool);
        pool.truncate(k);
        pool
    }
}
