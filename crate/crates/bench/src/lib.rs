//! Fixtures shared by the benchmarks.

use bncodec::data::{image_to_tensor, synthetic_corpus};
use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform `[-1, 1)` tensor of the given shape.
pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// A deterministic square RGB test image as `[1, 3, size, size]`.
pub fn test_image(size: u32) -> Tensor {
    image_to_tensor(&synthetic_corpus(1, 1, size)[0].1, &Device::Cpu).unwrap()
}
