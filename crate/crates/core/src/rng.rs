//! Seeded, splittable random source.
//!
//! Backed by ChaCha8 with an explicit stream id, so independent consumers
//! (initialization, per-epoch shuffles, per-step dropout masks) each get their
//! own deterministic sequence derived from `(seed, stream)`. Drawing from one
//! stream never perturbs another, which is what makes resumed runs bit-exact.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::TensorError;
use crate::tensor::Tensor;

/// Stream ids used by training. Per-epoch and per-step consumers add the
/// epoch or step index to their base.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const SHUFFLE: u64 = 1 << 32;
    pub const DROPOUT: u64 = 2 << 32;
    pub const NEGATIVES: u64 = 3 << 32;
    pub const PROBE: u64 = 4 << 32;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dist {
    Gaussian { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
    Bernoulli { p: f64 },
}

impl Dist {
    fn validate(self) -> Result<Self, TensorError> {
        let ok = match self {
            Dist::Gaussian { mean, std } => mean.is_finite() && std.is_finite() && std > 0.0,
            Dist::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            Dist::Bernoulli { p } => (0.0..=1.0).contains(&p),
        };
        if ok {
            Ok(self)
        } else {
            Err(TensorError::Distribution(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    /// Independent sequence `stream` under `seed`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    /// Uniform integer in `0..n`. Uses `u64` arithmetic so results do not
    /// depend on the platform's pointer width.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n as u64) as usize
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn draw(&mut self, dist: Dist, shape: &[usize]) -> Result<Tensor, TensorError> {
        let dist = dist.validate()?;
        let n = shape.iter().product::<usize>();
        let data = (0..n)
            .map(|_| match dist {
                Dist::Gaussian { mean, std } => mean + std * self.standard_normal(),
                Dist::Uniform { lo, hi } => lo + (hi - lo) * self.next_f64(),
                Dist::Bernoulli { p } => {
                    if self.next_f64() < p {
                        1.0
                    } else {
                        0.0
                    }
                }
            })
            .collect();
        Tensor::new(shape, data)
    }

    pub fn gaussian(&mut self, mean: f64, std: f64, shape: &[usize]) -> Result<Tensor, TensorError> {
        self.draw(Dist::Gaussian { mean, std }, shape)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64, shape: &[usize]) -> Result<Tensor, TensorError> {
        self.draw(Dist::Uniform { lo, hi }, shape)
    }

    pub fn bernoulli(&mut self, p: f64, shape: &[usize]) -> Result<Tensor, TensorError> {
        self.draw(Dist::Bernoulli { p }, shape)
    }
}
