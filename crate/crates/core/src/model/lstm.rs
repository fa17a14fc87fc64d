//! Unidirectional LSTM with gate order input, forget, cell, output.

use std::collections::BTreeMap;

use super::OoBNetParams;
use crate::error::{Error, Result};
use crate::tensor::ops::{dot, sigmoid_scalar};
use crate::tensor::{Scalar, Tensor};

/// Hidden and cell state, both `[lstm_units]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T: Scalar = f32> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(units: usize) -> Self {
        LstmState {
            h: Tensor::zeros(vec![units]),
            c: Tensor::zeros(vec![units]),
        }
    }
}

pub(crate) struct LstmWeights<'a, T: Scalar> {
    w_ih: &'a [T],
    w_hh: &'a [T],
    bias: &'a [T],
    units: usize,
    input_dim: usize,
}

impl<'a, T: Scalar> LstmWeights<'a, T> {
    pub(crate) fn from_params(params: &'a OoBNetParams<T>) -> Result<Self> {
        let w_ih = params.get("lstm.weight_ih")?;
        let w_hh = params.get("lstm.weight_hh")?;
        let bias = params.get("lstm.bias")?;
        let units = w_hh.shape()[1];
        let input_dim = w_ih.shape()[1];
        if w_ih.shape() != [4 * units, input_dim]
            || w_hh.shape() != [4 * units, units]
            || bias.shape() != [4 * units]
        {
            return Err(Error::shape(
                "lstm",
                format!(
                    "inconsistent weights: ih {:?}, hh {:?}, bias {:?}",
                    w_ih.shape(),
                    w_hh.shape(),
                    bias.shape()
                ),
            ));
        }
        Ok(LstmWeights {
            w_ih: w_ih.data(),
            w_hh: w_hh.data(),
            bias: bias.data(),
            units,
            input_dim,
        })
    }
}

pub(crate) struct LstmStepCache<T: Scalar> {
    x: Vec<T>,
    h_prev: Vec<T>,
    c_prev: Vec<T>,
    /// Activated gates `[i | f | g | o]`.
    gates: Vec<T>,
    tanh_c: Vec<T>,
}

fn step<T: Scalar>(w: &LstmWeights<'_, T>, x: &[T], h: &[T], c: &[T]) -> (Vec<T>, Vec<T>, LstmStepCache<T>) {
    let (u, d) = (w.units, w.input_dim);
    let mut gates: Vec<T> = (0..4 * u)
        .map(|r| w.bias[r] + dot(&w.w_ih[r * d..(r + 1) * d], x) + dot(&w.w_hh[r * u..(r + 1) * u], h))
        .collect();
    for (r, a) in gates.iter_mut().enumerate() {
        *a = if (2 * u..3 * u).contains(&r) {
            a.tanh()
        } else {
            sigmoid_scalar(*a)
        };
    }
    let mut c_new = Vec::with_capacity(u);
    let mut h_new = Vec::with_capacity(u);
    let mut tanh_c = Vec::with_capacity(u);
    for k in 0..u {
        let (i, f, g, o) = (gates[k], gates[u + k], gates[2 * u + k], gates[3 * u + k]);
        let ck = f * c[k] + i * g;
        let tc = ck.tanh();
        c_new.push(ck);
        tanh_c.push(tc);
        h_new.push(o * tc);
    }
    let cache = LstmStepCache {
        x: x.to_vec(),
        h_prev: h.to_vec(),
        c_prev: c.to_vec(),
        gates,
        tanh_c,
    };
    (h_new, c_new, cache)
}

/// One LSTM time step. Returns the new hidden output and the updated state.
pub fn lstm_step<T: Scalar>(
    params: &OoBNetParams<T>,
    x: &Tensor<T>,
    state: &LstmState<T>,
) -> Result<(Tensor<T>, LstmState<T>)> {
    let w = LstmWeights::from_params(params)?;
    if x.shape() != [w.input_dim] {
        return Err(Error::shape(
            "lstm_step",
            format!("input {:?} vs expected [{}]", x.shape(), w.input_dim),
        ));
    }
    if state.h.shape() != [w.units] || state.c.shape() != [w.units] {
        return Err(Error::shape(
            "lstm_step",
            format!("state {:?}/{:?} vs [{}]", state.h.shape(), state.c.shape(), w.units),
        ));
    }
    state.h.ensure_finite("lstm state h")?;
    state.c.ensure_finite("lstm state c")?;
    let (h, c, _) = step(&w, x.data(), state.h.data(), state.c.data());
    let h = Tensor::from_parts(vec![w.units], h);
    let next = LstmState {
        h: h.clone(),
        c: Tensor::from_parts(vec![w.units], c),
    };
    Ok((h, next))
}

/// Runs `[T, D]` inputs from a zero state; returns `[T, U]` hidden outputs.
pub(crate) fn run_sequence<T: Scalar>(
    w: &LstmWeights<'_, T>,
    inputs: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<LstmStepCache<T>>)> {
    if inputs.rank() != 2 || inputs.shape()[1] != w.input_dim {
        return Err(Error::shape(
            "lstm",
            format!("inputs {:?} vs [T, {}]", inputs.shape(), w.input_dim),
        ));
    }
    let frames = inputs.shape()[0];
    let mut h = vec![T::zero(); w.units];
    let mut c = vec![T::zero(); w.units];
    let mut out = Vec::with_capacity(frames * w.units);
    let mut caches = Vec::with_capacity(frames);
    for x in inputs.data().chunks_exact(w.input_dim) {
        let (h_new, c_new, cache) = step(w, x, &h, &c);
        out.extend_from_slice(&h_new);
        caches.push(cache);
        h = h_new;
        c = c_new;
    }
    Ok((Tensor::from_parts(vec![frames, w.units], out), caches))
}

/// Backpropagation through time over a whole sequence.
pub(crate) fn backward_sequence<T: Scalar>(
    w: &LstmWeights<'_, T>,
    caches: &[LstmStepCache<T>],
    d_hidden: &Tensor<T>,
) -> Result<(Tensor<T>, BTreeMap<String, Tensor<T>>)> {
    let (u, d) = (w.units, w.input_dim);
    let frames = caches.len();
    if d_hidden.shape() != [frames, u] {
        return Err(Error::shape(
            "lstm backward",
            format!("d_hidden {:?} vs [{frames}, {u}]", d_hidden.shape()),
        ));
    }
    let mut d_w_ih = vec![T::zero(); 4 * u * d];
    let mut d_w_hh = vec![T::zero(); 4 * u * u];
    let mut d_bias = vec![T::zero(); 4 * u];
    let mut d_inputs = vec![T::zero(); frames * d];
    let mut dh_next = vec![T::zero(); u];
    let mut dc_next = vec![T::zero(); u];
    let mut da = vec![T::zero(); 4 * u];
    let one = T::one();

    for t in (0..frames).rev() {
        let cache = &caches[t];
        let g = &cache.gates;
        for k in 0..u {
            let (i, f, gg, o) = (g[k], g[u + k], g[2 * u + k], g[3 * u + k]);
            let tc = cache.tanh_c[k];
            let dh = d_hidden.data()[t * u + k] + dh_next[k];
            let d_o = dh * tc;
            let dc = dh * o * (one - tc * tc) + dc_next[k];
            dc_next[k] = dc * f;
            da[k] = dc * gg * i * (one - i);
            da[u + k] = dc * cache.c_prev[k] * f * (one - f);
            da[2 * u + k] = dc * i * (one - gg * gg);
            da[3 * u + k] = d_o * o * (one - o);
        }
        dh_next.fill(T::zero());
        let dx = &mut d_inputs[t * d..(t + 1) * d];
        for r in 0..4 * u {
            let a = da[r];
            d_bias[r] += a;
            let wi = &w.w_ih[r * d..(r + 1) * d];
            let dwi = &mut d_w_ih[r * d..(r + 1) * d];
            for k in 0..d {
                dwi[k] += a * cache.x[k];
                dx[k] += a * wi[k];
            }
            let wh = &w.w_hh[r * u..(r + 1) * u];
            let dwh = &mut d_w_hh[r * u..(r + 1) * u];
            for k in 0..u {
                dwh[k] += a * cache.h_prev[k];
                dh_next[k] += a * wh[k];
            }
        }
    }
    let mut grads = BTreeMap::new();
    grads.insert("weight_ih".to_string(), Tensor::from_parts(vec![4 * u, d], d_w_ih));
    grads.insert("weight_hh".to_string(), Tensor::from_parts(vec![4 * u, u], d_w_hh));
    grads.insert("bias".to_string(), Tensor::from_parts(vec![4 * u], d_bias));
    Ok((Tensor::from_parts(vec![frames, d], d_inputs), grads))
}
