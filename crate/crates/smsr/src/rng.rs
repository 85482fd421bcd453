//! Seeded random number generation. Every stochastic component of the engine
//! draws from a ChaCha stream so runs are reproducible across platforms.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Scalar, Shape, Tensor};

pub type EngineRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> EngineRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for epoch `t` of a run seeded with `seed`. Resuming a
/// run at epoch t reconstructs exactly the stream an uninterrupted run used.
pub fn epoch_stream(seed: u64, epoch: usize) -> EngineRng {
    ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch as u64 + 1)))
}

pub fn uniform_tensor<T: Scalar>(shape: Shape, lo: f64, hi: f64, rng: &mut EngineRng) -> Tensor<T> {
    let data = (0..shape.len())
        .map(|_| T::from_f64(rng.gen_range(lo..hi)))
        .collect();
    Tensor::from_vec(shape, data).expect("generated data matches shape")
}

pub fn normal_tensor<T: Scalar>(shape: Shape, rng: &mut EngineRng) -> Tensor<T> {
    let data = (0..shape.len())
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            T::from_f64(v)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("generated data matches shape")
}

/// He-style fan-in uniform init for conv kernels feeding ReLU layers:
/// U(-b, b) with b = sqrt(6 / fan_in).
pub fn he_uniform_tensor<T: Scalar>(shape: Shape, fan_in: usize, rng: &mut EngineRng) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    uniform_tensor(shape, -bound, bound, rng)
}
