//! Shared layer building blocks: batchnorm parameter bundles and weight
//! initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{BnState, Tensor};

/// Learnable scale/shift plus running statistics of one batchnorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub state: BnState,
}

impl BnLayer {
    /// gamma = 1, beta = 0, running mean 0 / var 1.
    pub fn new(features: usize) -> BnLayer {
        BnLayer {
            gamma: Tensor::filled(vec![features], 1.0),
            beta: Tensor::zeros(vec![features]),
            state: BnState::new(features),
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.numel()
    }
}

/// Fan-in-scaled uniform init: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
pub fn he_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let limit = (6.0 / fan_in as f32).sqrt();
    let numel = shape.iter().product();
    let data: Vec<f32> = (0..numel).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::from_raw(shape, data)
}
