//! Finite-difference checks shared by the gradient and acceptance tests.
//! Each function returns the worst relative error it saw.

use oobnet_core::model::{backward_clip, forward_clip_cached, forward_clip_logits, init_params, Mode, ModelConfig, OoBNetParams};
use oobnet_core::tensor::ops;
use oobnet_core::train::bce_loss;
use oobnet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{all, numeric_grad, random_tensor, rel_error, weighted_sum, with_data};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Checks d(Σ r ⊙ op(x, p...))/d(x, p...) for an op with tensor operands.
fn check_operands(
    operands: &[Tensor<f64>],
    r: &Tensor<f64>,
    forward: impl Fn(&[Tensor<f64>]) -> Tensor<f64>,
    analytic: &[Tensor<f64>],
) -> f64 {
    let mut worst = 0.0f64;
    for (k, operand) in operands.iter().enumerate() {
        let numeric = numeric_grad(operand.data(), &all(operand.len()), |x| {
            let mut ops = operands.to_vec();
            ops[k] = with_data(operand, x);
            weighted_sum(&forward(&ops), r)
        });
        worst = worst.max(rel_error(analytic[k].data(), &numeric));
    }
    worst
}

pub fn conv2d(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (n, c, f) = (g.gen_range(1..3), g.gen_range(1..4), g.gen_range(1..4));
    let k = [1, 3][g.gen_range(0..2)];
    let (stride, padding) = (g.gen_range(1..3), g.gen_range(0..k / 2 + 1));
    let (h, w) = (g.gen_range(k..7), g.gen_range(k..7));
    let x = random_tensor(&mut g, &[n, c, h, w], -1.0, 1.0);
    let wt = random_tensor(&mut g, &[f, c, k, k], -1.0, 1.0);
    let b = random_tensor(&mut g, &[f], -1.0, 1.0);
    let y = ops::conv2d(&x, &wt, &b, stride, padding).unwrap();
    let r = random_tensor(&mut g, y.shape(), -1.0, 1.0);
    let grad = ops::conv2d_backward(&x, &wt, stride, padding, &r).unwrap();
    check_operands(
        &[x, wt, b],
        &r,
        |o| ops::conv2d(&o[0], &o[1], &o[2], stride, padding).unwrap(),
        &[grad.d_input.clone(), grad.param("weight").unwrap().clone(), grad.param("bias").unwrap().clone()],
    )
}

pub fn depthwise_conv2d(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (n, c) = (g.gen_range(1..3), g.gen_range(1..4));
    let (stride, padding) = (g.gen_range(1..3), g.gen_range(0..2));
    let (h, w) = (g.gen_range(3..7), g.gen_range(3..7));
    let x = random_tensor(&mut g, &[n, c, h, w], -1.0, 1.0);
    let wt = random_tensor(&mut g, &[c, 3, 3], -1.0, 1.0);
    let b = random_tensor(&mut g, &[c], -1.0, 1.0);
    let y = ops::depthwise_conv2d(&x, &wt, &b, stride, padding).unwrap();
    let r = random_tensor(&mut g, y.shape(), -1.0, 1.0);
    let grad = ops::depthwise_conv2d_backward(&x, &wt, stride, padding, &r).unwrap();
    check_operands(
        &[x, wt, b],
        &r,
        |o| ops::depthwise_conv2d(&o[0], &o[1], &o[2], stride, padding).unwrap(),
        &[grad.d_input.clone(), grad.param("weight").unwrap().clone(), grad.param("bias").unwrap().clone()],
    )
}

pub fn linear(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (n, i, o) = (g.gen_range(1..5), g.gen_range(1..6), g.gen_range(1..6));
    let x = random_tensor(&mut g, &[n, i], -1.0, 1.0);
    let wt = random_tensor(&mut g, &[o, i], -1.0, 1.0);
    let b = random_tensor(&mut g, &[o], -1.0, 1.0);
    let r = random_tensor(&mut g, &[n, o], -1.0, 1.0);
    let grad = ops::linear_backward(&x, &wt, &r).unwrap();
    check_operands(
        &[x, wt, b],
        &r,
        |o| ops::linear(&o[0], &o[1], &o[2]).unwrap(),
        &[grad.d_input.clone(), grad.param("weight").unwrap().clone(), grad.param("bias").unwrap().clone()],
    )
}

/// Elementwise inputs kept away from ReLU6's kinks at 0 and 6.
fn smooth_input(g: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    Tensor::from_fn(vec![n], |_| loop {
        let v: f64 = g.gen_range(-2.0..8.0);
        if v.abs() > 1e-3 && (v - 6.0).abs() > 1e-3 {
            break v;
        }
    })
}

pub fn relu6(seed: u64) -> f64 {
    let mut g = rng(seed);
    let x = smooth_input(&mut g, 24);
    let r = random_tensor(&mut g, &[24], -1.0, 1.0);
    let d = ops::relu6_backward(&x, &r).unwrap().d_input;
    check_operands(&[x], &r, |o| ops::relu6(&o[0]), &[d])
}

pub fn sigmoid(seed: u64) -> f64 {
    let mut g = rng(seed);
    let x = random_tensor(&mut g, &[24], -8.0, 8.0);
    let r = random_tensor(&mut g, &[24], -1.0, 1.0);
    let d = ops::sigmoid_backward(&ops::sigmoid(&x), &r).unwrap().d_input;
    check_operands(&[x], &r, |o| ops::sigmoid(&o[0]), &[d])
}

pub fn tanh(seed: u64) -> f64 {
    let mut g = rng(seed);
    let x = random_tensor(&mut g, &[24], -4.0, 4.0);
    let r = random_tensor(&mut g, &[24], -1.0, 1.0);
    let d = ops::tanh_backward(&ops::tanh(&x), &r).unwrap().d_input;
    check_operands(&[x], &r, |o| ops::tanh(&o[0]), &[d])
}

pub fn global_avg_pool(seed: u64) -> f64 {
    let mut g = rng(seed);
    let shape = [g.gen_range(1..3), g.gen_range(1..4), g.gen_range(1..5), g.gen_range(1..5)];
    let x = random_tensor(&mut g, &shape, -1.0, 1.0);
    let r = random_tensor(&mut g, &shape[..2], -1.0, 1.0);
    let d = ops::global_avg_pool_backward(&shape, &r).unwrap().d_input;
    check_operands(&[x], &r, |o| ops::global_avg_pool(&o[0]).unwrap(), &[d])
}

pub fn layer_norm(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (n, d) = (g.gen_range(1..4), g.gen_range(2..8));
    let x = random_tensor(&mut g, &[n, d], -2.0, 2.0);
    let gamma = random_tensor(&mut g, &[d], 0.5, 1.5);
    let beta = random_tensor(&mut g, &[d], -0.5, 0.5);
    let r = random_tensor(&mut g, &[n, d], -1.0, 1.0);
    let eps = ops::LAYER_NORM_EPS;
    let (_, cache) = ops::layer_norm_cached(&x, &gamma, &beta, eps).unwrap();
    let grad = ops::layer_norm_backward(&cache, &gamma, &r).unwrap();
    check_operands(
        &[x, gamma, beta],
        &r,
        |o| ops::layer_norm(&o[0], &o[1], &o[2], eps).unwrap(),
        &[grad.d_input.clone(), grad.param("gamma").unwrap().clone(), grad.param("beta").unwrap().clone()],
    )
}

pub fn dropout(seed: u64) -> f64 {
    let mut g = rng(seed);
    let x = random_tensor(&mut g, &[30], -1.0, 1.0);
    let r = random_tensor(&mut g, &[30], -1.0, 1.0);
    let (_, mask) = ops::dropout(&x, 0.5, &mut rng(seed ^ 1), true).unwrap();
    let d = ops::dropout_backward(&mask, &r).unwrap().d_input;
    check_operands(&[x], &r, |o| ops::dropout(&o[0], 0.5, &mut rng(seed ^ 1), true).unwrap().0, &[d])
}

pub fn bce(seed: u64) -> f64 {
    let mut g = rng(seed);
    let n = g.gen_range(1..20);
    let z = random_tensor(&mut g, &[n], -6.0, 6.0);
    let labels: Vec<u8> = (0..n).map(|_| g.gen_range(0..2)).collect();
    let (_, grad) = bce_loss(&z, &labels).unwrap();
    let numeric = numeric_grad(z.data(), &all(n), |x| bce_loss(&with_data(&z, x), &labels).unwrap().0);
    rel_error(grad.data(), &numeric)
}

/// Checks every parameter tensor of a full model on a random clip under the
/// clip loss, dropout included (the mask is replayed from a fixed seed).
/// With `per_tensor = Some(k)` only `k` random coordinates of each tensor
/// are probed.
pub fn model(config: &ModelConfig, frames: usize, seed: u64, per_tensor: Option<usize>) -> f64 {
    let mut g = rng(seed);
    let mut params: OoBNetParams<f64> = init_params(config, &mut g).unwrap();
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += g.gen_range(-0.05..0.05);
        }
    }
    let s = config.input_size;
    let clip = random_tensor(&mut g, &[frames, 3, s, s], 0.0, 1.0);
    let labels: Vec<u8> = (0..frames).map(|_| g.gen_range(0..2)).collect();
    let drop_seed = seed.wrapping_mul(31) + 7;

    let fwd = forward_clip_cached(&params, config, &clip, Mode::Train(&mut rng(drop_seed))).unwrap();
    let (_, d_logits) = bce_loss(&fwd.logits, &labels).unwrap();
    let grads = backward_clip(&params, config, &fwd.cache, &d_logits).unwrap();

    let loss = |p: &OoBNetParams<f64>| {
        let logits = forward_clip_logits(p, config, &clip, Mode::Train(&mut rng(drop_seed))).unwrap();
        bce_loss(&logits, &labels).unwrap().0
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut worst = 0.0f64;
    for name in names {
        let len = params.get(&name).unwrap().len();
        let coords: Vec<usize> = match per_tensor {
            Some(k) if k < len => (0..k).map(|_| g.gen_range(0..len)).collect(),
            _ => all(len),
        };
        let base = params.get(&name).unwrap().data().to_vec();
        let mut probe = params.clone();
        let numeric = numeric_grad(&base, &coords, |x| {
            probe.get_mut(&name).unwrap().data_mut().copy_from_slice(x);
            loss(&probe)
        });
        let analytic: Vec<f64> = coords.iter().map(|&i| grads[&name].data()[i]).collect();
        let err = rel_error(&analytic, &numeric);
        assert!(err.is_finite(), "{name}");
        worst = worst.max(err);
    }
    worst
}

pub const OPS: [(&str, fn(u64) -> f64); 9] = [
    ("conv2d", conv2d),
    ("depthwise_conv2d", depthwise_conv2d),
    ("linear", linear),
    ("relu6", relu6),
    ("sigmoid", sigmoid),
    ("tanh", tanh),
    ("global_avg_pool", global_avg_pool),
    ("layer_norm", layer_norm),
    ("dropout", dropout),
];
