//! Shared fixtures for the benchmarks.

use drmc_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

/// Low-dose and full-dose patch pair of side `p`.
pub fn patch_pair(p: usize, seed: u64) -> (Tensor, Tensor) {
    let full = random(&[1, p, p, p], seed);
    let low = random(&[1, p, p, p], seed + 1);
    (low, full)
}
