//! Inverted-residual convolutional backbone.

use super::{absorb, ModelConfig, OoBNetParams, ParamGrads};
use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::{Scalar, Tensor};

/// One inverted residual block after stage expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub index: usize,
    pub in_channels: usize,
    pub hidden: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// False when the expansion factor is 1 and the 1×1 expansion is skipped.
    pub expand: bool,
    pub residual: bool,
}

impl BlockLayout {
    /// Parameter name prefix; zero-padded so name order is block order.
    pub fn prefix(&self) -> String {
        format!("block{:02}", self.index)
    }
}

pub(crate) struct BlockCache<T: Scalar> {
    input: Tensor<T>,
    expand_pre: Option<Tensor<T>>,
    expanded: Option<Tensor<T>>,
    depthwise_pre: Tensor<T>,
    depthwise_act: Tensor<T>,
}

pub(crate) struct BackboneCache<T: Scalar> {
    input: Tensor<T>,
    stem_pre: Tensor<T>,
    blocks: Vec<BlockCache<T>>,
    /// Head conv input and pre-activation.
    head: Option<(Tensor<T>, Tensor<T>)>,
    pooled_shape: Vec<usize>,
}

/// Pooled features `[N, feature_dim]` for a batch of frames `[N, 3, S, S]`.
pub fn backbone_forward<T: Scalar>(
    params: &OoBNetParams<T>,
    config: &ModelConfig,
    batch: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = config.input_size;
    if batch.rank() != 4 || batch.shape()[1..] != [3, s, s] {
        return Err(Error::shape(
            "backbone_forward",
            format!("batch must be [N, 3, {s}, {s}], got {:?}", batch.shape()),
        ));
    }
    forward(params, config, batch, false).map(|(f, _)| f)
}

pub(crate) fn forward<T: Scalar>(
    params: &OoBNetParams<T>,
    config: &ModelConfig,
    input: &Tensor<T>,
    record: bool,
) -> Result<(Tensor<T>, Option<BackboneCache<T>>)> {
    let stem_pre = ops::conv2d(input, params.get("stem.weight")?, params.get("stem.bias")?, 2, 1)?;
    let mut x = ops::relu6(&stem_pre);
    let mut blocks = Vec::new();

    for b in config.block_layouts() {
        let p = b.prefix();
        let (expand_pre, expanded) = if b.expand {
            let pre = ops::conv2d(
                &x,
                params.get(&format!("{p}.expand.weight"))?,
                params.get(&format!("{p}.expand.bias"))?,
                1,
                0,
            )?;
            let act = ops::relu6(&pre);
            (Some(pre), Some(act))
        } else {
            (None, None)
        };
        let dw_in = expanded.as_ref().unwrap_or(&x);
        let depthwise_pre = ops::depthwise_conv2d(
            dw_in,
            params.get(&format!("{p}.depthwise.weight"))?,
            params.get(&format!("{p}.depthwise.bias"))?,
            b.stride,
            1,
        )?;
        let depthwise_act = ops::relu6(&depthwise_pre);
        let mut out = ops::conv2d(
            &depthwise_act,
            params.get(&format!("{p}.project.weight"))?,
            params.get(&format!("{p}.project.bias"))?,
            1,
            0,
        )?;
        if b.residual {
            out.add_assign(&x)?;
        }
        let input = std::mem::replace(&mut x, out);
        if record {
            blocks.push(BlockCache {
                input,
                expand_pre,
                expanded,
                depthwise_pre,
                depthwise_act,
            });
        }
    }

    let head = if config.has_head_conv() {
        let pre = ops::conv2d(&x, params.get("head.weight")?, params.get("head.bias")?, 1, 0)?;
        let act = ops::relu6(&pre);
        let input = std::mem::replace(&mut x, act);
        Some((input, pre))
    } else {
        None
    };

    let features = ops::global_avg_pool(&x)?;
    let cache = record.then(|| BackboneCache {
        input: input.clone(),
        stem_pre,
        blocks,
        head,
        pooled_shape: x.shape().to_vec(),
    });
    Ok((features, cache))
}

pub(crate) fn backward<T: Scalar>(
    params: &OoBNetParams<T>,
    config: &ModelConfig,
    cache: &BackboneCache<T>,
    d_features: &Tensor<T>,
    grads: &mut ParamGrads<T>,
) -> Result<()> {
    let mut d = ops::global_avg_pool_backward(&cache.pooled_shape, d_features)?.d_input;

    if let Some((head_in, head_pre)) = &cache.head {
        let d_pre = ops::relu6_backward(head_pre, &d)?.d_input;
        let g = ops::conv2d_backward(head_in, params.get("head.weight")?, 1, 0, &d_pre)?;
        absorb(grads, "head", g.d_params);
        d = g.d_input;
    }

    let layouts = config.block_layouts();
    for (b, bc) in layouts.iter().zip(&cache.blocks).rev() {
        let p = b.prefix();
        let g = ops::conv2d_backward(
            &bc.depthwise_act,
            params.get(&format!("{p}.project.weight"))?,
            1,
            0,
            &d,
        )?;
        absorb(grads, &format!("{p}.project"), g.d_params);
        let d_dw_pre = ops::relu6_backward(&bc.depthwise_pre, &g.d_input)?.d_input;
        let dw_in = bc.expanded.as_ref().unwrap_or(&bc.input);
        let g = ops::depthwise_conv2d_backward(
            dw_in,
            params.get(&format!("{p}.depthwise.weight"))?,
            b.stride,
            1,
            &d_dw_pre,
        )?;
        absorb(grads, &format!("{p}.depthwise"), g.d_params);
        let mut d_in = match &bc.expand_pre {
            Some(expand_pre) => {
                let d_pre = ops::relu6_backward(expand_pre, &g.d_input)?.d_input;
                let g = ops::conv2d_backward(
                    &bc.input,
                    params.get(&format!("{p}.expand.weight"))?,
                    1,
                    0,
                    &d_pre,
                )?;
                absorb(grads, &format!("{p}.expand"), g.d_params);
                g.d_input
            }
            None => g.d_input,
        };
        if b.residual {
            d_in.add_assign(&d)?;
        }
        d = d_in;
    }

    let d_pre = ops::relu6_backward(&cache.stem_pre, &d)?.d_input;
    let g = ops::conv2d_backward(&cache.input, params.get("stem.weight")?, 2, 1, &d_pre)?;
    absorb(grads, "stem", g.d_params);
    Ok(())
}
