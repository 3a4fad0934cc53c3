//! Seeded, platform-independent randomness.
//!
//! Everything stochastic draws from ChaCha8, a counter-based generator with a
//! published specification. Independent streams for parallel work are
//! derived with [`stream`], so the result of a batch does not depend on how it
//! was scheduled.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The `index`-th independent stream under `seed`.
pub fn stream(seed: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec(rng: &mut Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| normal(rng)).collect()
}

pub fn uniform(rng: &mut Rng) -> f64 {
    rng.random::<f64>()
}

pub fn uniform_in(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform(rng)
}

pub fn index(rng: &mut Rng, n: usize) -> usize {
    rng.random_range(0..n)
}
