//! Shared parameter containers and initializers.

use crate::autodiff::Tensor;
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Dense layer parameters: `weight (in, out)`, `bias (out,)`.
#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        LinearParams {
            weight: fan_in_uniform(rng, &[fan_in, fan_out], fan_in),
            bias: Tensor::zeros(IxDyn(&[fan_out])),
        }
    }
}

/// Uniform init scaled by the inverse square root of the fan-in.
pub fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    uniform(rng, shape, bound)
}

/// Uniform init in `[-bound, bound)`. Fills in row-major element order so the
/// result is fully determined by the RNG stream.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_shape_vec(IxDyn(shape), data).expect("uniform init shape")
}
