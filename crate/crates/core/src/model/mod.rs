//! The out-of-body classifier.
//!
//! Per frame: inverted-residual backbone → layer norm → dropout → LSTM →
//! layer norm → linear → sigmoid. Frames of a clip share one LSTM state that
//! starts at zero, so the probability for frame `t` only depends on frames
//! `0..=t` of the same clip.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::{self, LayerNormCache};
use crate::tensor::{Scalar, Tensor};

mod backbone;
pub mod checkpoint;
mod lstm;

pub use backbone::{backbone_forward, BlockLayout};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use lstm::{lstm_step, LstmState};

use backbone::BackboneCache;
use lstm::LstmStepCache;

/// One stage of inverted residual blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvertedResidualSpec {
    pub expansion_factor: usize,
    pub out_channels: usize,
    /// Stride of the first block in the stage; repeats use stride 1.
    pub stride: usize,
    pub repeats: usize,
}

impl InvertedResidualSpec {
    pub const fn new(expansion_factor: usize, out_channels: usize, stride: usize, repeats: usize) -> Self {
        InvertedResidualSpec {
            expansion_factor,
            out_channels,
            stride,
            repeats,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side length of the square input frames.
    pub input_size: usize,
    pub stem_channels: usize,
    pub backbone_blocks: Vec<InvertedResidualSpec>,
    /// Width of the pooled backbone features. When it differs from the last
    /// block's channel count a 1×1 head convolution maps between them.
    pub feature_dim: usize,
    pub lstm_units: usize,
    pub dropout_rate: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small backbone that trains on a single CPU core.
    pub fn desk() -> Self {
        ModelConfig {
            input_size: 64,
            stem_channels: 8,
            backbone_blocks: vec![
                InvertedResidualSpec::new(2, 16, 2, 1),
                InvertedResidualSpec::new(2, 24, 2, 1),
                InvertedResidualSpec::new(4, 32, 2, 1),
            ],
            feature_dim: 32,
            lstm_units: 32,
            dropout_rate: 0.5,
            layer_norm_eps: ops::LAYER_NORM_EPS,
        }
    }

    /// Full MobileNetV2 backbone with a 640-unit LSTM.
    pub fn mobilenet_v2() -> Self {
        ModelConfig {
            input_size: 64,
            stem_channels: 32,
            backbone_blocks: vec![
                InvertedResidualSpec::new(1, 16, 1, 1),
                InvertedResidualSpec::new(6, 24, 2, 2),
                InvertedResidualSpec::new(6, 32, 2, 3),
                InvertedResidualSpec::new(6, 64, 2, 4),
                InvertedResidualSpec::new(6, 96, 1, 3),
                InvertedResidualSpec::new(6, 160, 2, 3),
                InvertedResidualSpec::new(6, 320, 1, 1),
            ],
            feature_dim: 1280,
            lstm_units: 640,
            dropout_rate: 0.5,
            layer_norm_eps: ops::LAYER_NORM_EPS,
        }
    }

    /// Minimal network for gradient checks: one residual block, one strided.
    pub fn tiny() -> Self {
        ModelConfig {
            input_size: 8,
            stem_channels: 8,
            backbone_blocks: vec![
                InvertedResidualSpec::new(2, 8, 1, 1),
                InvertedResidualSpec::new(2, 12, 2, 1),
            ],
            feature_dim: 12,
            lstm_units: 8,
            dropout_rate: 0.5,
            layer_norm_eps: ops::LAYER_NORM_EPS,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "mobilenet_v2" | "mobilenetv2" => Some(Self::mobilenet_v2()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.backbone_blocks.is_empty() {
            return bad("backbone needs at least one block stage".into());
        }
        for (i, b) in self.backbone_blocks.iter().enumerate() {
            if b.expansion_factor < 1 || b.out_channels < 1 || b.repeats < 1 {
                return bad(format!("block stage {i}: expansion, channels and repeats must be >= 1"));
            }
            if b.stride != 1 && b.stride != 2 {
                return bad(format!("block stage {i}: stride must be 1 or 2, got {}", b.stride));
            }
        }
        let downsample = 1usize << self.stride2_stages();
        if self.input_size < 8 || self.input_size % downsample != 0 {
            return bad(format!(
                "input_size {} must be >= 8 and divisible by {downsample}",
                self.input_size
            ));
        }
        if self.stem_channels < 1 || self.feature_dim < 1 || self.lstm_units < 1 {
            return bad("stem_channels, feature_dim and lstm_units must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} must lie in [0, 1)", self.dropout_rate));
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Number of stride-2 stages including the stem.
    pub fn stride2_stages(&self) -> u32 {
        1 + self.backbone_blocks.iter().filter(|b| b.stride == 2).count() as u32
    }

    /// Expanded, per-block layout of the backbone.
    pub fn block_layouts(&self) -> Vec<BlockLayout> {
        let mut layouts = Vec::new();
        let mut in_ch = self.stem_channels;
        for spec in &self.backbone_blocks {
            for r in 0..spec.repeats {
                let stride = if r == 0 { spec.stride } else { 1 };
                layouts.push(BlockLayout {
                    index: layouts.len(),
                    in_channels: in_ch,
                    hidden: in_ch * spec.expansion_factor,
                    out_channels: spec.out_channels,
                    stride,
                    expand: spec.expansion_factor != 1,
                    residual: stride == 1 && in_ch == spec.out_channels,
                });
                in_ch = spec.out_channels;
            }
        }
        layouts
    }

    fn backbone_channels(&self) -> usize {
        self.backbone_blocks.last().map_or(self.stem_channels, |b| b.out_channels)
    }

    /// True when a 1×1 head convolution sits between the blocks and pooling.
    pub fn has_head_conv(&self) -> bool {
        self.feature_dim != self.backbone_channels()
    }

    /// Every learned tensor's name and shape, in lexicographic name order.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut shapes = BTreeMap::new();
        let mut put = |name: String, shape: Vec<usize>| {
            shapes.insert(name, shape);
        };
        put("stem.weight".into(), vec![self.stem_channels, 3, 3, 3]);
        put("stem.bias".into(), vec![self.stem_channels]);
        for b in self.block_layouts() {
            let p = b.prefix();
            if b.expand {
                put(format!("{p}.expand.weight"), vec![b.hidden, b.in_channels, 1, 1]);
                put(format!("{p}.expand.bias"), vec![b.hidden]);
            }
            put(format!("{p}.depthwise.weight"), vec![b.hidden, 3, 3]);
            put(format!("{p}.depthwise.bias"), vec![b.hidden]);
            put(format!("{p}.project.weight"), vec![b.out_channels, b.hidden, 1, 1]);
            put(format!("{p}.project.bias"), vec![b.out_channels]);
        }
        if self.has_head_conv() {
            put("head.weight".into(), vec![self.feature_dim, self.backbone_channels(), 1, 1]);
            put("head.bias".into(), vec![self.feature_dim]);
        }
        let (d, u) = (self.feature_dim, self.lstm_units);
        put("norm_in.gamma".into(), vec![d]);
        put("norm_in.beta".into(), vec![d]);
        put("lstm.weight_ih".into(), vec![4 * u, d]);
        put("lstm.weight_hh".into(), vec![4 * u, u]);
        put("lstm.bias".into(), vec![4 * u]);
        put("norm_out.gamma".into(), vec![u]);
        put("norm_out.beta".into(), vec![u]);
        put("classifier.weight".into(), vec![1, u]);
        put("classifier.bias".into(), vec![1]);
        shapes
    }
}

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))` for a weight shape.
///
/// Rank 4 is a convolution `[F, C, kH, kW]`, rank 3 a depthwise filter bank
/// `[C, kH, kW]` (one input and one output channel per filter), rank 2 a
/// matrix `[out, in]`. Rank-1 tensors are biases or norm parameters and have
/// no bound.
pub fn glorot_bound(shape: &[usize]) -> Option<f64> {
    let (fan_in, fan_out) = match *shape {
        [f, c, kh, kw] => (c * kh * kw, f * kh * kw),
        [_, kh, kw] => (kh * kw, kh * kw),
        [o, i] => (i, o),
        _ => return None,
    };
    Some((6.0 / (fan_in + fan_out) as f64).sqrt())
}

/// Gradients keyed like the parameters they belong to.
pub type ParamGrads<T> = BTreeMap<String, Tensor<T>>;

/// All learned tensors of the network, iterated in lexicographic name order.
#[derive(Debug, Clone, PartialEq)]
pub struct OoBNetParams<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> OoBNetParams<T> {
    /// Wraps a tensor map after checking it against `config`.
    pub fn from_tensors(config: &ModelConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let expected = config.param_shapes();
        for (name, shape) in &expected {
            match tensors.get(name) {
                None => {
                    return Err(Error::InvalidConfig(format!("missing parameter {name}")));
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::InvalidConfig(format!(
                        "parameter {name} has shape {:?}, config implies {shape:?}",
                        t.shape()
                    )));
                }
                _ => {}
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::UnknownParameter(extra.clone()));
        }
        Ok(OoBNetParams { tensors })
    }

    /// Every parameter set to `value`.
    pub fn filled(config: &ModelConfig, value: T) -> Self {
        let tensors = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| (name, Tensor::full(shape, value)))
            .collect();
        OoBNetParams { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> OoBNetParams<U> {
        OoBNetParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor<T>> {
        self.tensors
    }
}

/// Glorot-uniform weights, zero biases, unit layer-norm gains and a forget
/// gate bias of 1.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<OoBNetParams<T>> {
    config.validate()?;
    let u = config.lstm_units;
    let mut tensors = BTreeMap::new();
    for (name, shape) in config.param_shapes() {
        let t = if let Some(bound) = glorot_bound(&shape) {
            Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound)))
        } else if name.ends_with(".gamma") {
            Tensor::full(shape, T::one())
        } else if name == "lstm.bias" {
            Tensor::from_fn(shape, |i| if (u..2 * u).contains(&i) { T::one() } else { T::zero() })
        } else {
            Tensor::zeros(shape)
        };
        tensors.insert(name, t);
    }
    Ok(OoBNetParams { tensors })
}

/// Whether a forward pass trains (dropout active, randomness consumed) or
/// infers (deterministic, no generator available).
pub enum Mode<'a> {
    Train(&'a mut dyn RngCore),
    Infer,
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Forward state of one clip, consumed by [`backward_clip`].
pub struct ClipCache<T: Scalar> {
    backbone: BackboneCache<T>,
    norm_in: LayerNormCache<T>,
    dropout_mask: Option<Tensor<T>>,
    lstm_steps: Vec<LstmStepCache<T>>,
    norm_out: LayerNormCache<T>,
    classifier_input: Tensor<T>,
}

/// Pre-sigmoid outputs of a clip and the state needed to backpropagate.
pub struct ClipForward<T: Scalar> {
    /// One logit per frame, shape `[T]`.
    pub logits: Tensor<T>,
    pub cache: ClipCache<T>,
}

fn check_clip<T: Scalar>(config: &ModelConfig, clip: &Tensor<T>) -> Result<usize> {
    let s = config.input_size;
    if clip.rank() != 4 || clip.shape()[1..] != [3, s, s] {
        return Err(Error::shape(
            "forward_clip",
            format!("clip must be [T, 3, {s}, {s}], got {:?}", clip.shape()),
        ));
    }
    Ok(clip.shape()[0])
}

fn sequence_head<T: Scalar>(
    params: &OoBNetParams<T>,
    config: &ModelConfig,
    features: &Tensor<T>,
    mode: Mode<'_>,
) -> Result<(Tensor<T>, LayerNormCache<T>, Option<Tensor<T>>, Vec<LstmStepCache<T>>, LayerNormCache<T>, Tensor<T>)> {
    let eps = T::lit(config.layer_norm_eps);
    let (normed, norm_in) =
        ops::layer_norm_cached(features, params.get("norm_in.gamma")?, params.get("norm_in.beta")?, eps)?;
    let (dropped, mask) = match mode {
        Mode::Train(rng) => {
            let (out, mask) = ops::dropout(&normed, config.dropout_rate, rng, true)?;
            (out, Some(mask))
        }
        Mode::Infer => (normed, None),
    };
    let weights = lstm::LstmWeights::from_params(params)?;
    let (hidden, steps) = lstm::run_sequence(&weights, &dropped)?;
    let (normed_out, norm_out) =
        ops::layer_norm_cached(&hidden, params.get("norm_out.gamma")?, params.get("norm_out.beta")?, eps)?;
    let logits = ops::linear(&normed_out, params.get("classifier.weight")?, params.get("classifier.bias")?)?;
    let frames = logits.len();
    Ok((logits.reshape(vec![frames])?, norm_in, mask, steps, norm_out, normed_out))
}

/// Runs a clip `[T, 3, S, S]` and keeps everything needed for backprop.
pub fn forward_clip_cached<T: Scalar>(
    params: &OoBNetParams<T>,
    config: &ModelConfig,
    clip: &Tensor<T>,
    mode: Mode<'_>,
) -> Result<ClipForward<T>> {
    check_clip(config, clip)?;
    let (features, backbone) = backbone::forward(params, config, clip, true)?;
    let backbone = backbone.expect("recorded backbone cache");
    let (logits, norm_in, dropout_mask, lstm_steps, norm_out, classifier_input) =
        sequence_head(params, config, &features, mode)?;
    Ok(ClipForward {
        logits,
        cache: ClipCache {
            backbone,
            norm_in,
            dropout_mask,
            lstm_steps,
            norm_out,
            classifier_input,
        },
    })
}

/// Per-frame pre-sigmoid scores for a clip.
pub fn forward_clip_logits<T: Scalar>(
    params: &OoBNetParams<T>,
    config: &ModelConfig,
    clip: &Tensor<T>,
    mode: Mode<'_>,
) -> Result<Tensor<T>> {
    check_clip(config, clip)?;
    let (features, _) = backbone::forward(params, config, clip, false)?;
    Ok(sequence_head(params, config, &features, mode)?.0)
}

/// Per-frame out-of-body probabilities for a clip `[T, 3, S, S]`.
pub fn forward_clip<T: Scalar>(
    params: &OoBNetParams<T>,
    config: &ModelConfig,
    clip: &Tensor<T>,
    mode: Mode<'_>,
) -> Result<Tensor<T>> {
    let probs = ops::sigmoid(&forward_clip_logits(params, config, clip, mode)?);
    probs.ensure_finite("forward_clip")?;
    Ok(probs)
}

/// Gradients of a scalar loss with respect to every parameter, given the
/// loss gradient with respect to the clip's logits.
pub fn backward_clip<T: Scalar>(
    params: &OoBNetParams<T>,
    config: &ModelConfig,
    cache: &ClipCache<T>,
    d_logits: &Tensor<T>,
) -> Result<ParamGrads<T>> {
    let frames = cache.lstm_steps.len();
    if d_logits.shape() != [frames] {
        return Err(Error::shape(
            "backward_clip",
            format!("d_logits {:?} vs {frames} frames", d_logits.shape()),
        ));
    }
    let mut grads = ParamGrads::new();
    let d_logits = d_logits.clone().reshape(vec![frames, 1])?;

    let g = ops::linear_backward(&cache.classifier_input, params.get("classifier.weight")?, &d_logits)?;
    absorb(&mut grads, "classifier", g.d_params);
    let g = ops::layer_norm_backward(&cache.norm_out, params.get("norm_out.gamma")?, &g.d_input)?;
    absorb(&mut grads, "norm_out", g.d_params);

    let weights = lstm::LstmWeights::from_params(params)?;
    let (d_seq, lstm_grads) = lstm::backward_sequence(&weights, &cache.lstm_steps, &g.d_input)?;
    absorb(&mut grads, "lstm", lstm_grads);

    let d_normed = match &cache.dropout_mask {
        Some(mask) => ops::dropout_backward(mask, &d_seq)?.d_input,
        None => d_seq,
    };
    let g = ops::layer_norm_backward(&cache.norm_in, params.get("norm_in.gamma")?, &d_normed)?;
    absorb(&mut grads, "norm_in", g.d_params);

    backbone::backward(params, config, &cache.backbone, &g.d_input, &mut grads)?;
    Ok(grads)
}

pub(crate) fn absorb<T: Scalar>(grads: &mut ParamGrads<T>, prefix: &str, layer: BTreeMap<String, Tensor<T>>) {
    for (role, g) in layer {
        grads.insert(format!("{prefix}.{role}"), g);
    }
}

/// 1 (out-of-body) where `probability >= threshold`, else 0.
pub fn binarize(probabilities: &[f64], threshold: f64) -> Vec<u8> {
    debug_assert!(threshold > 0.0 && threshold < 1.0);
    probabilities.iter().map(|&p| u8::from(p >= threshold)).collect()
}

/// Probabilities for a whole frame sequence, run as consecutive
/// non-overlapping clips of at most `clip_len` frames in inference mode.
pub fn predict_frames(
    params: &OoBNetParams<f32>,
    config: &ModelConfig,
    frames: &[Tensor<f32>],
    clip_len: usize,
) -> Result<Vec<f64>> {
    if clip_len == 0 {
        return Err(Error::InvalidArgument("clip_len must be positive".into()));
    }
    if frames.is_empty() {
        return Err(Error::Empty("no frames to predict".into()));
    }
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(clip_len) {
        let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
        let clip = crate::tensor::stack(&refs)?;
        let probs = forward_clip(params, config, &clip, Mode::Infer)?;
        out.extend(probs.data().iter().map(|&p| p as f64));
    }
    Ok(out)
}
