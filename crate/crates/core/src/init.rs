//! Seeded parameter initialization.
//!
//! All randomness in the workbench flows through `ChaCha8Rng` so that a
//! (seed, shape) pair produces bit-identical tensors on every platform.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gaussian init with the given standard deviation.
pub fn normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Tensor::new(shape, data).expect("numel matches shape")
}

/// Uniform init with standard deviation 1/sqrt(fan_in), i.e.
/// U(-sqrt(3/fan_in), sqrt(3/fan_in)).
pub fn fanin_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let limit = (3.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("numel matches shape")
}

pub fn zeros(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape)
}

pub fn ones(shape: Vec<usize>) -> Tensor {
    let numel: usize = shape.iter().product();
    Tensor::new(shape, vec![1.0; numel]).expect("numel matches shape")
}
