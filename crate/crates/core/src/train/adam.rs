use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{OoBNetParams, ParamGrads};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates per parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &OoBNetParams<T>) -> Self {
        let zeros: BTreeMap<String, Tensor<T>> = params
            .iter()
            .map(|(k, p)| (k.clone(), Tensor::zeros(p.shape().to_vec())))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter, in place.
pub fn adam_step<T: Scalar>(
    params: &mut OoBNetParams<T>,
    grads: &ParamGrads<T>,
    state: &mut AdamState<T>,
    config: &AdamConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(format!("no gradient for {name}")))?;
        let m = state.m.get(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        let v = state.v.get(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        if g.shape() != p.shape() || m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{name}: param {:?}, grad {:?}, moments {:?}/{:?}",
                    p.shape(),
                    g.shape(),
                    m.shape(),
                    v.shape()
                ),
            ));
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - config.beta1), T::lit(1.0 - config.beta2));
    let bc1 = T::lit(1.0 - config.beta1.powi(t));
    let bc2 = T::lit(1.0 - config.beta2.powi(t));
    let lr = T::lit(config.learning_rate);
    let eps = T::lit(config.eps);

    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.get_mut(name).expect("checked above").data_mut();
        let v = state.v.get_mut(name).expect("checked above").data_mut();
        for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
