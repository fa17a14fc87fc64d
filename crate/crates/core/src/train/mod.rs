//! Training loop, loss, optimizer and operating-point selection.

mod adam;
mod augment;

use std::cmp::Ordering;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use augment::{adjust_contrast, augment_frame, rotate, AugmentConfig};

use crate::data::AnnotatedSequence;
use crate::error::{Error, Result};
use crate::metrics::{confusion, precision_recall_f1};
use crate::model::{backward_clip, binarize, forward_clip_cached, predict_frames, Mode, ModelConfig, OoBNetParams};
use crate::tensor::{stack, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub clip_len: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub rotation_max_deg: f64,
    pub contrast_range: (f64, f64),
    /// Threshold used for validation F1 during checkpoint selection.
    pub threshold_default: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.00009,
            clip_len: 64,
            epochs: 300,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            rotation_max_deg: 15.0,
            contrast_range: (0.8, 1.2),
            threshold_default: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.clip_len == 0 {
            return bad("clip_len must be positive".into());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(self.threshold_default > 0.0 && self.threshold_default < 1.0) {
            return bad(format!("threshold_default must lie in (0, 1), got {}", self.threshold_default));
        }
        self.augment().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            rotation_max_deg: self.rotation_max_deg,
            contrast_range: self.contrast_range,
        }
    }
}

/// Mean binary cross-entropy over a clip, computed from logits, and its
/// gradient with respect to each logit: `(sigmoid(z) - y) / T`.
pub fn bce_loss<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 1 || logits.len() != labels.len() || labels.is_empty() {
        return Err(Error::shape(
            "bce_loss",
            format!("logits {:?} vs {} labels", logits.shape(), labels.len()),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::InvalidArgument(format!("labels must be 0 or 1, found {bad}")));
    }
    let n = T::lit(labels.len() as f64);
    let mut total = T::zero();
    let grad = Tensor::from_fn(vec![labels.len()], |i| {
        let z = logits.data()[i];
        let y = T::lit(labels[i] as f64);
        // softplus(z) - y z, with softplus written to avoid overflow
        total += z.max(T::zero()) - y * z + (-z.abs()).exp().ln_1p();
        (crate::tensor::ops::sigmoid_scalar(z) - y) / n
    });
    Ok((total / n, grad))
}

/// Non-overlapping `[start, end)` windows of at most `clip_len` frames
/// covering `0..len`. A trailing single frame joins the previous window,
/// since one-step sequences give the recurrent layer nothing to learn from.
pub fn clip_windows(len: usize, clip_len: usize) -> Vec<(usize, usize)> {
    assert!(clip_len > 0, "clip_len must be positive");
    let mut windows: Vec<(usize, usize)> = (0..len)
        .step_by(clip_len)
        .map(|s| (s, (s + clip_len).min(len)))
        .collect();
    if windows.len() >= 2 && clip_len > 1 {
        let last = windows[windows.len() - 1];
        if last.1 - last.0 == 1 {
            windows.pop();
            windows.last_mut().expect("two windows").1 = len;
        }
    }
    windows
}

/// Windows of [`clip_windows`] in random order.
pub fn sample_clips<R: Rng + ?Sized>(len: usize, clip_len: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let mut windows = clip_windows(len, clip_len);
    windows.shuffle(rng);
    windows
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    /// Set on the single epoch whose parameters were kept.
    pub is_best: bool,
}

pub fn write_log_csv<W: Write>(log: &[EpochLog], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epoch,train_loss,val_f1,is_best")?;
    for row in log {
        writeln!(
            out,
            "{},{:.6},{:.6},{}",
            row.epoch,
            row.train_loss,
            row.val_f1,
            u8::from(row.is_best)
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the highest validation F1 (the
    /// initial parameters if no epoch ran).
    pub params: OoBNetParams<f32>,
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochLog>,
}

/// Pooled F1 over sequences at a fixed threshold, inference mode.
pub fn validation_f1(
    params: &OoBNetParams<f32>,
    model: &ModelConfig,
    sequences: &[AnnotatedSequence],
    clip_len: usize,
    threshold: f64,
) -> Result<f64> {
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for seq in sequences {
        probs.extend(predict_frames(params, model, &seq.frames, clip_len)?);
        labels.extend_from_slice(&seq.labels);
    }
    let cm = confusion(&labels, &binarize(&probs, threshold))?;
    Ok(precision_recall_f1(&cm).2)
}

/// Trains with one clip per optimizer step and keeps the parameters of the
/// epoch with the best validation F1 (earliest on ties).
///
/// All randomness (clip order, augmentation, dropout) comes from a generator
/// seeded with `config.seed`, so equal inputs give bit-identical results.
/// `on_epoch` sees each row as it is produced; `is_best` there means "best so far".
pub fn train(
    initial: OoBNetParams<f32>,
    model: &ModelConfig,
    train_set: &[AnnotatedSequence],
    validation: &[AnnotatedSequence],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    model.validate()?;
    if train_set.iter().all(|s| s.is_empty()) {
        return Err(Error::Empty("training split has no frames".into()));
    }
    if validation.iter().all(|s| s.is_empty()) {
        return Err(Error::Empty("validation split has no frames".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let adam_cfg = config.adam();
    let augment_cfg = config.augment();
    let mut params = initial.clone();
    let mut state = AdamState::new(&params);
    let mut best: Option<(usize, f64, OoBNetParams<f32>)> = None;
    let mut log = Vec::with_capacity(config.epochs);

    let jobs: Vec<(usize, (usize, usize))> = train_set
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_empty())
        .flat_map(|(i, s)| clip_windows(s.len(), config.clip_len).into_iter().map(move |w| (i, w)))
        .collect();

    for epoch in 1..=config.epochs {
        let mut order = jobs.clone();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut frames) = (0.0f64, 0usize);
        for (video, (start, end)) in order {
            let seq = &train_set[video];
            let augmented = seq.frames[start..end]
                .iter()
                .map(|f| augment_frame(f, &augment_cfg, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let clip = stack(&augmented.iter().collect::<Vec<_>>())?;
            let fwd = forward_clip_cached(&params, model, &clip, Mode::Train(&mut rng))?;
            let (loss, d_logits) = bce_loss(&fwd.logits, &seq.labels[start..end])?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss became {loss} at epoch {epoch}, video {}, frames {start}..{end}",
                    seq.video_id
                )));
            }
            let grads = backward_clip(&params, model, &fwd.cache, &d_logits)?;
            adam_step(&mut params, &grads, &mut state, &adam_cfg)?;
            loss_sum += loss as f64 * (end - start) as f64;
            frames += end - start;
        }
        let val_f1 = validation_f1(&params, model, validation, config.clip_len, config.threshold_default)?;
        let improved = best.as_ref().map_or(true, |(_, f1, _)| val_f1.partial_cmp(f1) == Some(Ordering::Greater));
        if improved {
            best = Some((epoch, val_f1, params.clone()));
        }
        let row = EpochLog {
            epoch,
            train_loss: loss_sum / frames as f64,
            val_f1,
            is_best: improved,
        };
        log::info!("epoch {epoch}: loss {:.6}, val F1 {:.4}", row.train_loss, val_f1);
        on_epoch(&row);
        log.push(row);
    }

    let (best_epoch, params) = match best {
        Some((epoch, _, p)) => (Some(epoch), p),
        None => (None, initial),
    };
    for row in &mut log {
        row.is_best = Some(row.epoch) == best_epoch;
    }
    Ok(TrainOutcome { params, best_epoch, log })
}

/// Threshold maximizing F1 on `(probabilities, labels)`. Candidates are the
/// midpoints between consecutive distinct probabilities plus 0.5; ties go to
/// the candidate nearest 0.5, then the smaller one.
pub fn select_threshold_max_f1(probabilities: &[f64], labels: &[u8]) -> Result<f64> {
    if probabilities.len() != labels.len() {
        return Err(Error::shape(
            "select_threshold_max_f1",
            format!("{} probabilities vs {} labels", probabilities.len(), labels.len()),
        ));
    }
    if probabilities.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("probabilities for threshold selection".into()));
    }
    let mut pos: Vec<f64> = Vec::new();
    let mut neg: Vec<f64> = Vec::new();
    for (&p, &y) in probabilities.iter().zip(labels) {
        match y {
            0 => neg.push(p),
            1 => pos.push(p),
            other => return Err(Error::InvalidArgument(format!("labels must be 0 or 1, found {other}"))),
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::SingleClass("threshold selection needs both classes"));
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let at_or_above = |sorted: &[f64], t: f64| (sorted.len() - sorted.partition_point(|&p| p < t)) as u128;

    let mut distinct: Vec<f64> = probabilities.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut candidates: Vec<f64> = distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0).collect();
    candidates.push(0.5);

    let total_pos = pos.len() as u128;
    // F1 = 2tp / (2tp + fp + fn), kept as an exact fraction
    let score = |t: f64| {
        let tp = at_or_above(&pos, t);
        let fp = at_or_above(&neg, t);
        (2 * tp, 2 * tp + fp + (total_pos - tp))
    };
    let better = |a: (u128, u128), b: (u128, u128)| (a.0 * b.1).cmp(&(b.0 * a.1));

    let mut best_t = candidates[0];
    let mut best_s = score(best_t);
    for &t in &candidates[1..] {
        let s = score(t);
        let order = better(s, best_s).then_with(|| {
            (best_t - 0.5)
                .abs()
                .total_cmp(&(t - 0.5).abs())
                .then_with(|| best_t.total_cmp(&t))
        });
        if order == Ordering::Greater {
            best_t = t;
            best_s = s;
        }
    }
    Ok(best_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bce_at_half_is_ln2() {
        let (loss, grad) = bce_loss(&Tensor::<f64>::zeros(vec![4]), &[0, 1, 1, 0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(grad.data(), &[0.125, -0.125, -0.125, 0.125]);
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        let z = Tensor::new(vec![2], vec![800.0f64, -800.0]).unwrap();
        let (loss, grad) = bce_loss(&z, &[1, 0]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|g| g.abs() < 1e-300));
        let (loss, _) = bce_loss(&z, &[0, 1]).unwrap();
        assert_eq!(loss, 800.0);
    }

    #[test]
    fn bce_rejects_bad_input() {
        assert!(bce_loss(&Tensor::<f32>::zeros(vec![2]), &[0]).is_err());
        assert!(bce_loss(&Tensor::<f32>::zeros(vec![1]), &[2]).is_err());
    }

    #[test]
    fn windows_cover_sequence() {
        assert_eq!(clip_windows(10, 4), vec![(0, 4), (4, 8), (8, 10)]);
        assert_eq!(clip_windows(9, 4), vec![(0, 4), (4, 9)]);
        assert_eq!(clip_windows(3, 64), vec![(0, 3)]);
        assert_eq!(clip_windows(1, 64), vec![(0, 1)]);
        assert_eq!(clip_windows(0, 4), vec![]);
    }

    #[test]
    fn threshold_examples() {
        // separable: any threshold between 0.3 and 0.7 is perfect; 0.5 is a candidate
        assert_eq!(select_threshold_max_f1(&[0.1, 0.3, 0.7, 0.9], &[0, 0, 1, 1]).unwrap(), 0.5);
        // positives only above 0.8
        assert_eq!(select_threshold_max_f1(&[0.6, 0.7, 0.85, 0.95], &[0, 0, 1, 1]).unwrap(), 0.7 + (0.85 - 0.7) / 2.0);
        assert!(matches!(
            select_threshold_max_f1(&[0.2, 0.4], &[1, 1]),
            Err(Error::SingleClass(_))
        ));
    }

    /// Exhaustive reference: every candidate scored by a full scan.
    fn oracle(probs: &[f64], labels: &[u8]) -> f64 {
        let mut d = probs.to_vec();
        d.sort_by(f64::total_cmp);
        d.dedup();
        let mut cands: Vec<f64> = d.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0).collect();
        cands.push(0.5);
        let f1 = |t: f64| {
            let (mut tp, mut fp, mut fneg) = (0u128, 0u128, 0u128);
            for (&p, &y) in probs.iter().zip(labels) {
                match (p >= t, y == 1) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    _ => {}
                }
            }
            (2 * tp, 2 * tp + fp + fneg)
        };
        let mut best = cands[0];
        for &t in &cands {
            let (a, b) = (f1(t), f1(best));
            let gt = a.0 * b.1 > b.0 * a.1;
            let eq = a.0 * b.1 == b.0 * a.1;
            let closer = (t - 0.5).abs() < (best - 0.5).abs()
                || ((t - 0.5).abs() == (best - 0.5).abs() && t < best);
            if gt || (eq && closer) {
                best = t;
            }
        }
        best
    }

    proptest! {
        #[test]
        fn threshold_matches_exhaustive_search(
            raw in prop::collection::vec((0u32..40, any::<bool>()), 2..60)
        ) {
            let probs: Vec<f64> = raw.iter().map(|(p, _)| *p as f64 / 40.0).collect();
            let mut labels: Vec<u8> = raw.iter().map(|(_, y)| u8::from(*y)).collect();
            labels[0] = 0;
            labels[1] = 1;
            prop_assert_eq!(select_threshold_max_f1(&probs, &labels).unwrap(), oracle(&probs, &labels));
        }

        #[test]
        fn windows_partition_the_range(len in 0usize..300, clip in 1usize..80) {
            let w = clip_windows(len, clip);
            let mut next = 0;
            for &(s, e) in &w {
                prop_assert_eq!(s, next);
                prop_assert!(e > s && e - s <= clip + 1);
                next = e;
            }
            prop_assert_eq!(next, len);
        }
    }
}
