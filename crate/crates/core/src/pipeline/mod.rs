//! Inference over whole videos, out-of-body segments, redaction and
//! evaluation reports.

mod redact;
mod report;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use redact::{apply_redaction, box_blur, RedactionOutcome};
pub use report::{evaluate, evaluate_traces, CenterReport, GroupReport, LabeledTrace, MetricsReport, PooledReport, VideoReport};

use crate::error::{Error, Result};
use crate::model::{binarize, predict_frames, ModelConfig, OoBNetParams};
use crate::tensor::Tensor;

pub const TRACE_HEADER: [&str; 4] = ["frame_index", "probability", "label", "threshold"];

pub(crate) fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("threshold must lie in (0, 1), got {threshold}")))
    }
}

/// Per-frame probabilities of one video and their binarization.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTrace {
    pub video_id: String,
    probabilities: Vec<f64>,
    labels: Vec<u8>,
    threshold: f64,
}

impl PredictionTrace {
    pub fn new(video_id: impl Into<String>, probabilities: Vec<f64>, threshold: f64) -> Result<Self> {
        check_threshold(threshold)?;
        if let Some(p) = probabilities.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::NonFinite(format!("probability {p} outside [0, 1]")));
        }
        let labels = binarize(&probabilities, threshold);
        Ok(PredictionTrace {
            video_id: video_id.into(),
            probabilities,
            labels,
            threshold,
        })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn with_threshold(&self, threshold: f64) -> Result<Self> {
        Self::new(self.video_id.clone(), self.probabilities.clone(), threshold)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRACE_HEADER)?;
        for (i, (p, l)) in self.probabilities.iter().zip(&self.labels).enumerate() {
            w.write_record([i.to_string(), format!("{p:.9}"), l.to_string(), self.threshold.to_string()])?;
        }
        w.flush().map_err(|e| Error::InvalidArgument(format!("writing trace: {e}")))?;
        Ok(())
    }

    /// Parses a trace CSV, checking indices are `0..N` in order, the
    /// threshold is the same on every row, and labels agree with it.
    pub fn read_csv(video_id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
        let header = reader.headers()?;
        if header.iter().ne(TRACE_HEADER) {
            return Err(Error::InvalidArgument(format!(
                "trace header must be \"{}\"",
                TRACE_HEADER.join(",")
            )));
        }
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        let mut threshold = None;
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let bad = |m: &str| Error::InvalidArgument(format!("trace row {}: {m}", i + 1));
            if rec.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            if rec[0].parse::<usize>().ok() != Some(i) {
                return Err(bad("frame_index out of sequence"));
            }
            let p: f64 = rec[1].parse().map_err(|_| bad("bad probability"))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(bad("probability outside [0, 1]"));
            }
            probs.push(p);
            labels.push(rec[2].parse::<u8>().map_err(|_| bad("bad label"))?);
            let t: f64 = rec[3].parse().map_err(|_| bad("bad threshold"))?;
            match threshold {
                None => threshold = Some(t),
                Some(prev) if prev != t => return Err(bad("threshold differs from earlier rows")),
                Some(_) => {}
            }
        }
        let threshold = threshold.ok_or_else(|| Error::Empty("trace has no rows".into()))?;
        let trace = Self::new(video_id, probs, threshold)?;
        if let Some(i) = (0..labels.len()).find(|&i| labels[i] != trace.labels[i]) {
            return Err(Error::InvalidArgument(format!(
                "trace row {}: label {} disagrees with probability {} at threshold {threshold}",
                i + 1,
                labels[i],
                trace.probabilities[i]
            )));
        }
        Ok(trace)
    }
}

/// Runs the model over a preprocessed video in consecutive clips with fresh
/// recurrent state, inference mode.
pub fn predict_video(
    params: &OoBNetParams<f32>,
    config: &ModelConfig,
    video_id: &str,
    frames: &[Tensor<f32>],
    threshold: f64,
    clip_len: usize,
) -> Result<PredictionTrace> {
    check_threshold(threshold)?;
    if frames.is_empty() {
        return Err(Error::Empty(format!("video {video_id} has no frames")));
    }
    let probs = predict_frames(params, config, frames, clip_len)?;
    PredictionTrace::new(video_id, probs, threshold)
}

/// Inclusive frame range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start..=self.end).contains(&frame)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RedactionMode {
    Blackout,
    Blur,
    Delete,
}

impl std::str::FromStr for RedactionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blackout" => Ok(RedactionMode::Blackout),
            "blur" => Ok(RedactionMode::Blur),
            "delete" => Ok(RedactionMode::Delete),
            _ => Err(Error::InvalidArgument(format!("unknown redaction mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedactionPolicy {
    pub mode: RedactionMode,
    /// Frames added on both sides of every detected segment.
    pub margin_frames: usize,
    /// Box width for blur mode; odd and at least 9.
    pub blur_kernel: usize,
}

impl RedactionPolicy {
    pub const DEFAULT_MARGIN: usize = 1;
    pub const DEFAULT_BLUR_KERNEL: usize = 15;

    pub fn new(mode: RedactionMode) -> Self {
        RedactionPolicy {
            mode,
            margin_frames: Self::DEFAULT_MARGIN,
            blur_kernel: Self::DEFAULT_BLUR_KERNEL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == RedactionMode::Blur && (self.blur_kernel < 9 || self.blur_kernel % 2 == 0) {
            return Err(Error::InvalidConfig(format!(
                "blur kernel must be odd and >= 9, got {}",
                self.blur_kernel
            )));
        }
        Ok(())
    }
}

/// Maximal runs of 1s, each widened by `margin` and clipped to the
/// sequence; overlapping or touching results are merged.
pub fn segments_from_labels(labels: &[u8], margin: usize) -> Vec<Segment> {
    let n = labels.len();
    let mut out: Vec<Segment> = Vec::new();
    let mut i = 0;
    while i < n {
        if labels[i] != 1 {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && labels[i] == 1 {
            i += 1;
        }
        let seg = Segment {
            start: start.saturating_sub(margin),
            end: (i - 1).saturating_add(margin).min(n - 1),
        };
        match out.last_mut() {
            Some(prev) if seg.start <= prev.end + 1 => prev.end = prev.end.max(seg.end),
            _ => out.push(seg),
        }
    }
    out
}

pub fn segments_from_trace(trace: &PredictionTrace, policy: &RedactionPolicy) -> Vec<Segment> {
    segments_from_labels(trace.labels(), policy.margin_frames)
}

/// Per-frame 0/1 mask of `len` frames covered by `segments`.
pub fn flatten_segments(segments: &[Segment], len: usize) -> Vec<u8> {
    let mut mask = vec![0u8; len];
    for s in segments {
        mask[s.start.min(len)..(s.end + 1).min(len)].fill(1);
    }
    mask
}
