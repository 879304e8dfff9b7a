//! Seeded parameter initialization.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;

pub type ParamRng = ChaCha8Rng;

pub fn rng(seed: u64) -> ParamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut ParamRng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Uniform in `[-bound, bound]`.
pub fn uniform(shape: &[usize], bound: f64, rng: &mut ParamRng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}
