//! Forward and backward kernels.
//!
//! Forward kernels are pure functions. Each one has a `*_backward` partner
//! that takes the forward state it needs by reference and returns a
//! [`LayerGrad`]. [`backward`] offers the same kernels behind a single entry
//! point keyed by [`OpKind`] and an owned [`ForwardCache`].

use std::collections::BTreeMap;

use rand::Rng;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Gradients produced by one layer's backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad<T: Scalar> {
    pub d_input: Tensor<T>,
    /// Keyed by the parameter's role: `weight`, `bias`, `gamma`, `beta`.
    pub d_params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> LayerGrad<T> {
    fn input_only(d_input: Tensor<T>) -> Self {
        LayerGrad {
            d_input,
            d_params: BTreeMap::new(),
        }
    }

    fn with(mut self, name: &str, grad: Tensor<T>) -> Self {
        self.d_params.insert(name.to_string(), grad);
        self
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.d_params.get(name)
    }
}

fn expect_rank<T: Scalar>(op: &'static str, what: &str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(
            op,
            format!("{what} must have rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// Output length of a sliding window.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || kernel > input + 2 * padding {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

/// Range of output positions `o` whose tap `o*stride + k - pad` lands inside
/// the input.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > k {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[derive(Debug, Clone, Copy)]
struct PlaneGeom {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl PlaneGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// out += kernel ⋆ input for one (input plane, output plane) pair.
fn plane_forward<T: Scalar>(g: PlaneGeom, input: &[T], kernel: &[T], out: &mut [T]) {
    if g.is_pointwise() {
        let w = kernel[0];
        for (o, &x) in out.iter_mut().zip(input) {
            *o += w * x;
        }
        return;
    }
    for ki in 0..g.kh {
        let (oh_lo, oh_hi) = valid_range(ki, g.pad, g.stride, g.h, g.oh);
        for kj in 0..g.kw {
            let w = kernel[ki * g.kw + kj];
            let (ow_lo, ow_hi) = valid_range(kj, g.pad, g.stride, g.w, g.ow);
            for oh in oh_lo..oh_hi {
                let ih = oh * g.stride + ki - g.pad;
                let row_in = &input[ih * g.w..(ih + 1) * g.w];
                let row_out = &mut out[oh * g.ow..(oh + 1) * g.ow];
                if g.stride == 1 {
                    let shift = kj as isize - g.pad as isize;
                    let src = &row_in[(ow_lo as isize + shift) as usize..(ow_hi as isize + shift) as usize];
                    for (o, &x) in row_out[ow_lo..ow_hi].iter_mut().zip(src) {
                        *o += w * x;
                    }
                } else {
                    for ow in ow_lo..ow_hi {
                        row_out[ow] += w * row_in[ow * g.stride + kj - g.pad];
                    }
                }
            }
        }
    }
}

/// d_input += kernelᵀ ⋆ d_out.
fn plane_backward_input<T: Scalar>(g: PlaneGeom, d_out: &[T], kernel: &[T], d_input: &mut [T]) {
    if g.is_pointwise() {
        let w = kernel[0];
        for (d, &go) in d_input.iter_mut().zip(d_out) {
            *d += w * go;
        }
        return;
    }
    for ki in 0..g.kh {
        let (oh_lo, oh_hi) = valid_range(ki, g.pad, g.stride, g.h, g.oh);
        for kj in 0..g.kw {
            let w = kernel[ki * g.kw + kj];
            let (ow_lo, ow_hi) = valid_range(kj, g.pad, g.stride, g.w, g.ow);
            for oh in oh_lo..oh_hi {
                let ih = oh * g.stride + ki - g.pad;
                let row_go = &d_out[oh * g.ow..(oh + 1) * g.ow];
                let row_di = &mut d_input[ih * g.w..(ih + 1) * g.w];
                for ow in ow_lo..ow_hi {
                    row_di[ow * g.stride + kj - g.pad] += w * row_go[ow];
                }
            }
        }
    }
}

/// d_kernel += Σ input · d_out over all output positions.
fn plane_backward_kernel<T: Scalar>(g: PlaneGeom, input: &[T], d_out: &[T], d_kernel: &mut [T]) {
    if g.is_pointwise() {
        let mut acc = T::zero();
        for (&x, &go) in input.iter().zip(d_out) {
            acc += x * go;
        }
        d_kernel[0] += acc;
        return;
    }
    for ki in 0..g.kh {
        let (oh_lo, oh_hi) = valid_range(ki, g.pad, g.stride, g.h, g.oh);
        for kj in 0..g.kw {
            let (ow_lo, ow_hi) = valid_range(kj, g.pad, g.stride, g.w, g.ow);
            let mut acc = T::zero();
            for oh in oh_lo..oh_hi {
                let ih = oh * g.stride + ki - g.pad;
                let row_in = &input[ih * g.w..(ih + 1) * g.w];
                let row_go = &d_out[oh * g.ow..(oh + 1) * g.ow];
                for ow in ow_lo..ow_hi {
                    acc += row_in[ow * g.stride + kj - g.pad] * row_go[ow];
                }
            }
            d_kernel[ki * g.kw + kj] += acc;
        }
    }
}

struct ConvDims {
    n: usize,
    c: usize,
    f: usize,
    geom: PlaneGeom,
}

fn conv_dims<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    depthwise: bool,
) -> Result<ConvDims> {
    expect_rank(op, "input", input, 4)?;
    let [n, c, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
    let (f, kh, kw) = if depthwise {
        expect_rank(op, "weight", weight, 3)?;
        let s = weight.shape();
        if s[0] != c {
            return Err(Error::shape(
                op,
                format!("weight has {} filters but input has {c} channels", s[0]),
            ));
        }
        (c, s[1], s[2])
    } else {
        expect_rank(op, "weight", weight, 4)?;
        let s = weight.shape();
        if s[1] != c {
            return Err(Error::shape(
                op,
                format!("weight expects {} input channels but input has {c}", s[1]),
            ));
        }
        (s[0], s[2], s[3])
    };
    if bias.shape() != [f] {
        return Err(Error::shape(
            op,
            format!("bias shape {:?} does not match {f} filters", bias.shape()),
        ));
    }
    if stride == 0 {
        return Err(Error::shape(op, "stride must be at least 1"));
    }
    let oh = conv_out_len(h, kh, stride, padding).ok_or_else(|| {
        Error::shape(op, format!("kernel height {kh} exceeds padded input height {}", h + 2 * padding))
    })?;
    let ow = conv_out_len(w, kw, stride, padding).ok_or_else(|| {
        Error::shape(op, format!("kernel width {kw} exceeds padded input width {}", w + 2 * padding))
    })?;
    Ok(ConvDims {
        n,
        c,
        f,
        geom: PlaneGeom { h, w, kh, kw, oh, ow, stride, pad: padding },
    })
}

/// Standard 2-D convolution with zero padding.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let d = conv_dims("conv2d", input, weight, bias, stride, padding, false)?;
    let g = d.geom;
    let (in_plane, out_plane, k_len) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw);
    let mut out = vec![T::zero(); d.n * d.f * out_plane];
    let (x, wt, b) = (input.data(), weight.data(), bias.data());
    for n in 0..d.n {
        for f in 0..d.f {
            let o = &mut out[(n * d.f + f) * out_plane..(n * d.f + f + 1) * out_plane];
            o.fill(b[f]);
            for c in 0..d.c {
                let k = &wt[(f * d.c + c) * k_len..(f * d.c + c + 1) * k_len];
                let xi = &x[(n * d.c + c) * in_plane..(n * d.c + c + 1) * in_plane];
                plane_forward(g, xi, k, o);
            }
        }
    }
    Ok(Tensor::from_parts(vec![d.n, d.f, g.oh, g.ow], out))
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    d_out: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    let bias = Tensor::zeros(vec![weight.shape()[0]]);
    let d = conv_dims("conv2d backward", input, weight, &bias, stride, padding, false)?;
    let g = d.geom;
    if d_out.shape() != [d.n, d.f, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d backward",
            format!("d_out {:?} vs output {:?}", d_out.shape(), [d.n, d.f, g.oh, g.ow]),
        ));
    }
    let (in_plane, out_plane, k_len) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw);
    let mut d_in = vec![T::zero(); input.len()];
    let mut d_w = vec![T::zero(); weight.len()];
    let mut d_b = vec![T::zero(); d.f];
    let (x, wt, go) = (input.data(), weight.data(), d_out.data());
    for n in 0..d.n {
        for f in 0..d.f {
            let gp = &go[(n * d.f + f) * out_plane..(n * d.f + f + 1) * out_plane];
            d_b[f] += gp.iter().copied().sum::<T>();
            for c in 0..d.c {
                let kr = (f * d.c + c) * k_len..(f * d.c + c + 1) * k_len;
                let ir = (n * d.c + c) * in_plane..(n * d.c + c + 1) * in_plane;
                plane_backward_input(g, gp, &wt[kr.clone()], &mut d_in[ir.clone()]);
                plane_backward_kernel(g, &x[ir], gp, &mut d_w[kr]);
            }
        }
    }
    Ok(LayerGrad::input_only(Tensor::from_parts(input.shape().to_vec(), d_in))
        .with("weight", Tensor::from_parts(weight.shape().to_vec(), d_w))
        .with("bias", Tensor::from_parts(vec![d.f], d_b)))
}

/// Depthwise convolution: one `kH×kW` filter per channel.
pub fn depthwise_conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let d = conv_dims("depthwise_conv2d", input, weight, bias, stride, padding, true)?;
    let g = d.geom;
    let (in_plane, out_plane, k_len) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw);
    let mut out = vec![T::zero(); d.n * d.c * out_plane];
    let (x, wt, b) = (input.data(), weight.data(), bias.data());
    for n in 0..d.n {
        for c in 0..d.c {
            let p = n * d.c + c;
            let o = &mut out[p * out_plane..(p + 1) * out_plane];
            o.fill(b[c]);
            plane_forward(
                g,
                &x[p * in_plane..(p + 1) * in_plane],
                &wt[c * k_len..(c + 1) * k_len],
                o,
            );
        }
    }
    Ok(Tensor::from_parts(vec![d.n, d.c, g.oh, g.ow], out))
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    d_out: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    let bias = Tensor::zeros(vec![weight.shape()[0]]);
    let d = conv_dims("depthwise_conv2d backward", input, weight, &bias, stride, padding, true)?;
    let g = d.geom;
    if d_out.shape() != [d.n, d.c, g.oh, g.ow] {
        return Err(Error::shape(
            "depthwise_conv2d backward",
            format!("d_out {:?} vs output {:?}", d_out.shape(), [d.n, d.c, g.oh, g.ow]),
        ));
    }
    let (in_plane, out_plane, k_len) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw);
    let mut d_in = vec![T::zero(); input.len()];
    let mut d_w = vec![T::zero(); weight.len()];
    let mut d_b = vec![T::zero(); d.c];
    let (x, wt, go) = (input.data(), weight.data(), d_out.data());
    for n in 0..d.n {
        for c in 0..d.c {
            let p = n * d.c + c;
            let gp = &go[p * out_plane..(p + 1) * out_plane];
            d_b[c] += gp.iter().copied().sum::<T>();
            let ir = p * in_plane..(p + 1) * in_plane;
            let kr = c * k_len..(c + 1) * k_len;
            plane_backward_input(g, gp, &wt[kr.clone()], &mut d_in[ir.clone()]);
            plane_backward_kernel(g, &x[ir], gp, &mut d_w[kr]);
        }
    }
    Ok(LayerGrad::input_only(Tensor::from_parts(input.shape().to_vec(), d_in))
        .with("weight", Tensor::from_parts(weight.shape().to_vec(), d_w))
        .with("bias", Tensor::from_parts(vec![d.c], d_b)))
}

fn linear_dims<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    expect_rank("linear", "input", input, 2)?;
    expect_rank("linear", "weight", weight, 2)?;
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let (o, wd) = (weight.shape()[0], weight.shape()[1]);
    if wd != d {
        return Err(Error::shape(
            "linear",
            format!("input has {d} features but weight expects {wd}"),
        ));
    }
    Ok((n, d, o))
}

/// `out[n,o] = Σ_d input[n,d]·weight[o,d] + bias[o]`.
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d, o) = linear_dims(input, weight)?;
    if bias.shape() != [o] {
        return Err(Error::shape(
            "linear",
            format!("bias shape {:?} does not match {o} outputs", bias.shape()),
        ));
    }
    let (x, w, b) = (input.data(), weight.data(), bias.data());
    let mut out = Vec::with_capacity(n * o);
    for row in x.chunks_exact(d) {
        for (wr, &bo) in w.chunks_exact(d).zip(b) {
            out.push(dot(row, wr) + bo);
        }
    }
    Ok(Tensor::from_parts(vec![n, o], out))
}

pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    let (n, d, o) = linear_dims(input, weight)?;
    if d_out.shape() != [n, o] {
        return Err(Error::shape(
            "linear backward",
            format!("d_out {:?} vs output {:?}", d_out.shape(), [n, o]),
        ));
    }
    let (x, w, go) = (input.data(), weight.data(), d_out.data());
    let mut d_in = vec![T::zero(); n * d];
    let mut d_w = vec![T::zero(); o * d];
    let mut d_b = vec![T::zero(); o];
    for ni in 0..n {
        let xr = &x[ni * d..(ni + 1) * d];
        let dxr = &mut d_in[ni * d..(ni + 1) * d];
        for oi in 0..o {
            let g = go[ni * o + oi];
            d_b[oi] += g;
            let wr = &w[oi * d..(oi + 1) * d];
            let dwr = &mut d_w[oi * d..(oi + 1) * d];
            for k in 0..d {
                dxr[k] += g * wr[k];
                dwr[k] += g * xr[k];
            }
        }
    }
    Ok(LayerGrad::input_only(Tensor::from_parts(vec![n, d], d_in))
        .with("weight", Tensor::from_parts(vec![o, d], d_w))
        .with("bias", Tensor::from_parts(vec![o], d_b)))
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn relu6<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let six = T::lit(6.0);
    input.map(|x| x.max(T::zero()).min(six))
}

/// Gradient is 1 strictly inside (0, 6) and 0 elsewhere.
pub fn relu6_backward<T: Scalar>(input: &Tensor<T>, d_out: &Tensor<T>) -> Result<LayerGrad<T>> {
    same_shape("relu6 backward", input, d_out)?;
    let six = T::lit(6.0);
    let d = input
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&x, &g)| if x > T::zero() && x < six { g } else { T::zero() })
        .collect();
    Ok(LayerGrad::input_only(Tensor::from_parts(input.shape().to_vec(), d)))
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, d_out: &Tensor<T>) -> Result<LayerGrad<T>> {
    same_shape("sigmoid backward", output, d_out)?;
    let d = output
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&y, &g)| g * y * (T::one() - y))
        .collect();
    Ok(LayerGrad::input_only(Tensor::from_parts(output.shape().to_vec(), d)))
}

pub fn tanh<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| x.tanh())
}

pub fn tanh_backward<T: Scalar>(output: &Tensor<T>, d_out: &Tensor<T>) -> Result<LayerGrad<T>> {
    same_shape("tanh backward", output, d_out)?;
    let d = output
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&y, &g)| g * (T::one() - y * y))
        .collect();
    Ok(LayerGrad::input_only(Tensor::from_parts(output.shape().to_vec(), d)))
}

/// Mean over the spatial axes of an N-C-H-W tensor.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("global_avg_pool", "input", input, 4)?;
    let s = input.shape();
    let plane = s[2] * s[3];
    let inv = T::one() / T::lit(plane as f64);
    let out = input
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Ok(Tensor::from_parts(vec![s[0], s[1]], out))
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], d_out: &Tensor<T>) -> Result<LayerGrad<T>> {
    if input_shape.len() != 4 || d_out.shape() != [input_shape[0], input_shape[1]] {
        return Err(Error::shape(
            "global_avg_pool backward",
            format!("d_out {:?} vs input {input_shape:?}", d_out.shape()),
        ));
    }
    let plane = input_shape[2] * input_shape[3];
    let inv = T::one() / T::lit(plane as f64);
    let mut d = Vec::with_capacity(d_out.len() * plane);
    for &g in d_out.data() {
        d.extend(std::iter::repeat(g * inv).take(plane));
    }
    Ok(LayerGrad::input_only(Tensor::from_parts(input_shape.to_vec(), d)))
}

/// Forward state kept by [`layer_norm_cached`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormCache<T: Scalar> {
    pub x_hat: Tensor<T>,
    /// `1 / sqrt(var + eps)` per row.
    pub inv_std: Vec<T>,
}

/// Row-wise layer normalization with population variance.
pub fn layer_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    layer_norm_cached(input, gamma, beta, eps).map(|(out, _)| out)
}

pub fn layer_norm_cached<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    expect_rank("layer_norm", "input", input, 2)?;
    let (n, d) = (input.shape()[0], input.shape()[1]);
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "gamma {:?} / beta {:?} must both be [{d}]",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    if eps <= T::zero() {
        return Err(Error::InvalidArgument("layer_norm eps must be positive".into()));
    }
    let inv_d = T::one() / T::lit(d as f64);
    let mut x_hat = Vec::with_capacity(n * d);
    let mut out = Vec::with_capacity(n * d);
    let mut inv_std = Vec::with_capacity(n);
    for row in input.data().chunks_exact(d) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() * inv_d;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for ((&x, &g), &b) in row.iter().zip(gamma.data()).zip(beta.data()) {
            let xh = (x - mean) * is;
            x_hat.push(xh);
            out.push(xh * g + b);
        }
    }
    Ok((
        Tensor::from_parts(vec![n, d], out),
        LayerNormCache {
            x_hat: Tensor::from_parts(vec![n, d], x_hat),
            inv_std,
        },
    ))
}

pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    same_shape("layer_norm backward", &cache.x_hat, d_out)?;
    let (n, d) = (d_out.shape()[0], d_out.shape()[1]);
    let inv_d = T::one() / T::lit(d as f64);
    let mut d_in = Vec::with_capacity(n * d);
    let mut d_gamma = vec![T::zero(); d];
    let mut d_beta = vec![T::zero(); d];
    let mut dxh = vec![T::zero(); d];
    for r in 0..n {
        let xh = &cache.x_hat.data()[r * d..(r + 1) * d];
        let go = &d_out.data()[r * d..(r + 1) * d];
        let (mut sum_dxh, mut sum_dxh_xh) = (T::zero(), T::zero());
        for k in 0..d {
            d_gamma[k] += go[k] * xh[k];
            d_beta[k] += go[k];
            dxh[k] = go[k] * gamma.data()[k];
            sum_dxh += dxh[k];
            sum_dxh_xh += dxh[k] * xh[k];
        }
        let is = cache.inv_std[r];
        for k in 0..d {
            d_in.push(is * (dxh[k] - inv_d * sum_dxh - xh[k] * inv_d * sum_dxh_xh));
        }
    }
    Ok(LayerGrad::input_only(Tensor::from_parts(vec![n, d], d_in))
        .with("gamma", Tensor::from_parts(vec![d], d_gamma))
        .with("beta", Tensor::from_parts(vec![d], d_beta)))
}

/// Inverted dropout. Returns the output and the per-element scale mask
/// (`0` or `1/(1-rate)`); in inference mode the mask is all ones and the
/// generator is not touched.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate {rate} must lie in [0, 1)"
        )));
    }
    if !training || rate == 0.0 {
        return Ok((input.clone(), Tensor::full(input.shape().to_vec(), T::one())));
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask = Tensor::from_fn(input.shape().to_vec(), |_| {
        if rng.gen::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    });
    let out = input
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&x, &m)| x * m)
        .collect();
    Ok((Tensor::from_parts(input.shape().to_vec(), out), mask))
}

pub fn dropout_backward<T: Scalar>(mask: &Tensor<T>, d_out: &Tensor<T>) -> Result<LayerGrad<T>> {
    same_shape("dropout backward", mask, d_out)?;
    let d = mask
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&m, &g)| m * g)
        .collect();
    Ok(LayerGrad::input_only(Tensor::from_parts(mask.shape().to_vec(), d)))
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Identifies a kernel for [`backward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Conv2d,
    DepthwiseConv2d,
    Linear,
    Relu6,
    Sigmoid,
    Tanh,
    GlobalAvgPool,
    LayerNorm,
    Dropout,
}

impl OpKind {
    fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::DepthwiseConv2d => "depthwise_conv2d",
            OpKind::Linear => "linear",
            OpKind::Relu6 => "relu6",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Dropout => "dropout",
        }
    }
}

/// Owned forward state for [`backward`].
#[derive(Debug, Clone)]
pub enum ForwardCache<T: Scalar> {
    Conv2d { input: Tensor<T>, weight: Tensor<T>, stride: usize, padding: usize },
    DepthwiseConv2d { input: Tensor<T>, weight: Tensor<T>, stride: usize, padding: usize },
    Linear { input: Tensor<T>, weight: Tensor<T> },
    Relu6 { input: Tensor<T> },
    Sigmoid { output: Tensor<T> },
    Tanh { output: Tensor<T> },
    GlobalAvgPool { input_shape: Vec<usize> },
    LayerNorm { cache: LayerNormCache<T>, gamma: Tensor<T> },
    Dropout { mask: Tensor<T> },
}

impl<T: Scalar> ForwardCache<T> {
    pub fn kind(&self) -> OpKind {
        match self {
            ForwardCache::Conv2d { .. } => OpKind::Conv2d,
            ForwardCache::DepthwiseConv2d { .. } => OpKind::DepthwiseConv2d,
            ForwardCache::Linear { .. } => OpKind::Linear,
            ForwardCache::Relu6 { .. } => OpKind::Relu6,
            ForwardCache::Sigmoid { .. } => OpKind::Sigmoid,
            ForwardCache::Tanh { .. } => OpKind::Tanh,
            ForwardCache::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            ForwardCache::LayerNorm { .. } => OpKind::LayerNorm,
            ForwardCache::Dropout { .. } => OpKind::Dropout,
        }
    }
}

/// Backward pass of `op` from its cached forward state.
pub fn backward<T: Scalar>(
    op: OpKind,
    cache: Option<&ForwardCache<T>>,
    d_output: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    let cache = cache.ok_or(Error::MissingCache(op.name()))?;
    if cache.kind() != op {
        return Err(Error::MissingCache(op.name()));
    }
    match cache {
        ForwardCache::Conv2d { input, weight, stride, padding } => {
            conv2d_backward(input, weight, *stride, *padding, d_output)
        }
        ForwardCache::DepthwiseConv2d { input, weight, stride, padding } => {
            depthwise_conv2d_backward(input, weight, *stride, *padding, d_output)
        }
        ForwardCache::Linear { input, weight } => linear_backward(input, weight, d_output),
        ForwardCache::Relu6 { input } => relu6_backward(input, d_output),
        ForwardCache::Sigmoid { output } => sigmoid_backward(output, d_output),
        ForwardCache::Tanh { output } => tanh_backward(output, d_output),
        ForwardCache::GlobalAvgPool { input_shape } => global_avg_pool_backward(input_shape, d_output),
        ForwardCache::LayerNorm { cache, gamma } => layer_norm_backward(cache, gamma, d_output),
        ForwardCache::Dropout { mask } => dropout_backward(mask, d_output),
    }
}
