//! Seeded inputs shared by the benchmarks.

use oobnet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tensor of the given shape with entries uniform in `[-1, 1)`.
pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `n` scores with roughly balanced labels, positives scoring higher on average.
pub fn scored_labels(n: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    (0..n)
        .map(|_| {
            let label = u8::from(rng.gen_bool(0.5));
            (rng.gen::<f64>() * 0.7 + 0.3 * f64::from(label), label)
        })
        .unzip()
}
