#![allow(dead_code)]

pub mod gradcheck;

use oobnet_core::Tensor;
use rand::Rng;

pub const H: f64 = 1e-6;

/// Central differences of `f` at each coordinate listed in `coords`.
pub fn numeric_grad(x: &[f64], coords: &[usize], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + H;
            let up = f(&probe);
            probe[i] = orig - H;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

/// ‖a − b‖ / max(‖a‖, ‖b‖), or the plain difference when both are ~0.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-9 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Σ r ⊙ y, the scalar whose gradient w.r.t. y is r.
pub fn weighted_sum(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

pub fn with_data(t: &Tensor<f64>, data: &[f64]) -> Tensor<f64> {
    Tensor::new(t.shape().to_vec(), data.to_vec()).unwrap()
}
