//! Binary classification metrics with out-of-body (label 1) as the positive
//! class, plus mean ± sample-SD aggregation across centers.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

fn check_binary(labels: &[u8], what: &str) -> Result<()> {
    match labels.iter().position(|&l| l > 1) {
        None => Ok(()),
        Some(i) => Err(Error::InvalidArgument(format!(
            "{what}[{i}] = {} is not binary",
            labels[i]
        ))),
    }
}

pub fn confusion(labels_true: &[u8], labels_pred: &[u8]) -> Result<ConfusionMatrix> {
    if labels_true.len() != labels_pred.len() {
        return Err(Error::InvalidArgument(format!(
            "{} true labels vs {} predictions",
            labels_true.len(),
            labels_pred.len()
        )));
    }
    check_binary(labels_true, "labels_true")?;
    check_binary(labels_pred, "labels_pred")?;
    let mut cm = ConfusionMatrix::default();
    for (&y, &p) in labels_true.iter().zip(labels_pred) {
        match (y, p) {
            (1, 1) => cm.tp += 1,
            (0, 1) => cm.fp += 1,
            (0, 0) => cm.tn += 1,
            _ => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Precision, recall and F1; each ratio is 0 when its denominator is 0.
pub fn precision_recall_f1(cm: &ConfusionMatrix) -> (f64, f64, f64) {
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    (precision, recall, f1_score(precision, recall))
}

fn scored_pairs(scores: &[f64], labels: &[u8]) -> Result<(Vec<(f64, u8)>, u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    check_binary(labels, "labels")?;
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {i} is NaN")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    let pairs = scores.iter().copied().zip(labels.iter().copied()).collect();
    Ok((pairs, pos, neg))
}

/// Area under the ROC curve, equal to the Mann-Whitney statistic with half
/// credit for tied (positive, negative) pairs.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (mut pairs, pos, neg) = scored_pairs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass("roc_auc"));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the pair count: 2 per won pair, 1 per tie, so it stays an integer.
    let mut doubled: u128 = 0;
    let mut neg_below: u128 = 0;
    for group in pairs.chunk_by(|a, b| a.0.total_cmp(&b.0) == Ordering::Equal) {
        let p = group.iter().filter(|x| x.1 == 1).count() as u128;
        let n = group.len() as u128 - p;
        doubled += p * (2 * neg_below + n);
        neg_below += n;
    }
    Ok(doubled as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Step-wise area under the precision-recall curve: Σ (R_k − R_{k−1})·P_k
/// over descending score cut points, tied scores forming one cut point.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (mut pairs, pos, _) = scored_pairs(scores, labels)?;
    if pos == 0 {
        return Err(Error::SingleClass("average_precision needs a positive"));
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = 0.0;
    for group in pairs.chunk_by(|a, b| a.0.total_cmp(&b.0) == Ordering::Equal) {
        let p = group.iter().filter(|x| x.1 == 1).count() as u64;
        tp += p;
        fp += group.len() as u64 - p;
        if p > 0 {
            ap += ap_term(p, pos, tp, fp);
        }
    }
    Ok(ap)
}

/// One cut point's contribution: recall gain times precision.
#[inline]
pub fn ap_term(new_tp: u64, total_pos: u64, tp: u64, fp: u64) -> f64 {
    (new_tp as f64 / total_pos as f64) * (tp as f64 / (tp + fp) as f64)
}

/// Mean and sample standard deviation (n − 1 denominator, 0 for n = 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::Empty("aggregate of no values".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(Aggregate { mean, sd, n })
}

/// Rounds half away from zero to two decimals, for presentation only.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// The five reported metrics. Ranking metrics are `None` when the data lack
/// one of the classes they need.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub roc_auc: Option<f64>,
    pub ap: Option<f64>,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

impl MetricSet {
    /// Metrics of `scores` against `labels`, binarized at `threshold`.
    pub fn compute(scores: &[f64], labels: &[u8], threshold: f64) -> Result<(ConfusionMatrix, MetricSet)> {
        let pred = crate::model::binarize(scores, threshold);
        let cm = confusion(labels, &pred)?;
        let (precision, recall, f1) = precision_recall_f1(&cm);
        let roc_auc = match roc_auc(scores, labels) {
            Ok(v) => Some(v),
            Err(Error::SingleClass(_)) => None,
            Err(e) => return Err(e),
        };
        let ap = match average_precision(scores, labels) {
            Ok(v) => Some(v),
            Err(Error::SingleClass(_)) => None,
            Err(e) => return Err(e),
        };
        Ok((
            cm,
            MetricSet {
                roc_auc,
                ap,
                f1,
                precision,
                recall,
            },
        ))
    }
}

/// Mean ± SD of each metric over a set of groups (e.g. centers).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricAggregate {
    pub roc_auc: Option<Aggregate>,
    pub ap: Option<Aggregate>,
    pub f1: Aggregate,
    pub precision: Aggregate,
    pub recall: Aggregate,
}

/// Aggregates per-group metric sets. Ranking metrics skip groups where they
/// are undefined and are `None` if undefined everywhere.
pub fn aggregate_metric_sets(sets: &[MetricSet]) -> Result<MetricAggregate> {
    let optional = |f: fn(&MetricSet) -> Option<f64>| -> Result<Option<Aggregate>> {
        let vals: Vec<f64> = sets.iter().filter_map(f).collect();
        if vals.is_empty() {
            Ok(None)
        } else {
            aggregate(&vals).map(Some)
        }
    };
    let required = |f: fn(&MetricSet) -> f64| aggregate(&sets.iter().map(f).collect::<Vec<_>>());
    Ok(MetricAggregate {
        roc_auc: optional(|m| m.roc_auc)?,
        ap: optional(|m| m.ap)?,
        f1: required(|m| m.f1)?,
        precision: required(|m| m.precision)?,
        recall: required(|m| m.recall)?,
    })
}
