use rayon::prelude::*;
use serde::Serialize;

use super::check_threshold;
use crate::data::AnnotatedSequence;
use crate::error::{Error, Result};
use crate::metrics::{aggregate_metric_sets, ConfusionMatrix, MetricAggregate, MetricSet};
use crate::model::{predict_frames, ModelConfig, OoBNetParams};

/// Predicted probabilities of one video next to its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrace {
    pub video_id: String,
    pub center: String,
    pub probabilities: Vec<f64>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VideoReport {
    pub video_id: String,
    pub center: String,
    pub cm: ConfusionMatrix,
    pub metrics: MetricSet,
}

/// Metrics over all frames of one center within a group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CenterReport {
    pub center: String,
    pub videos: usize,
    pub cm: ConfusionMatrix,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PooledReport {
    pub cm: ConfusionMatrix,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub videos: Vec<VideoReport>,
    pub centers: Vec<CenterReport>,
    /// All frames of the group as one sample.
    pub pooled: PooledReport,
    /// Mean and sample SD of the per-center metrics.
    pub aggregate: MetricAggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub groups: Vec<GroupReport>,
    pub total_frames: u64,
    /// Out-of-body frames predicted as inside, over every group.
    pub fn_count: u64,
    pub fn_rate: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn scored(what: &str, probs: &[f64], labels: &[u8], threshold: f64) -> Result<(ConfusionMatrix, MetricSet)> {
    let (cm, metrics) = MetricSet::compute(probs, labels, threshold)?;
    if metrics.roc_auc.is_none() {
        log::warn!("{what} has a single class; ROC AUC reported as null");
    }
    Ok((cm, metrics))
}

/// Builds the report from per-group traces. Group order is preserved;
/// centers appear in order of first occurrence.
pub fn evaluate_traces(groups: &[(String, Vec<LabeledTrace>)], threshold: f64) -> Result<MetricsReport> {
    check_threshold(threshold)?;
    let mut reports = Vec::with_capacity(groups.len());
    let mut total = ConfusionMatrix::default();
    for (name, traces) in groups {
        if traces.is_empty() {
            return Err(Error::Empty(format!("group {name} has no videos")));
        }
        let mut videos = Vec::with_capacity(traces.len());
        let mut centers: Vec<(String, Vec<&LabeledTrace>)> = Vec::new();
        for t in traces {
            let (cm, metrics) = scored(&format!("video {}", t.video_id), &t.probabilities, &t.labels, threshold)?;
            videos.push(VideoReport {
                video_id: t.video_id.clone(),
                center: t.center.clone(),
                cm,
                metrics,
            });
            match centers.iter_mut().find(|(c, _)| *c == t.center) {
                Some((_, list)) => list.push(t),
                None => centers.push((t.center.clone(), vec![t])),
            }
        }
        let pool = |members: &[&LabeledTrace]| {
            let probs: Vec<f64> = members.iter().flat_map(|t| t.probabilities.iter().copied()).collect();
            let labels: Vec<u8> = members.iter().flat_map(|t| t.labels.iter().copied()).collect();
            (probs, labels)
        };
        let center_reports = centers
            .iter()
            .map(|(center, members)| {
                let (p, l) = pool(members);
                let (cm, metrics) = scored(&format!("center {center} in {name}"), &p, &l, threshold)?;
                Ok(CenterReport {
                    center: center.clone(),
                    videos: members.len(),
                    cm,
                    metrics,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let all: Vec<&LabeledTrace> = traces.iter().collect();
        let (p, l) = pool(&all);
        let (cm, metrics) = scored(&format!("group {name}"), &p, &l, threshold)?;
        total.merge(&cm);
        let aggregate = aggregate_metric_sets(&center_reports.iter().map(|c| c.metrics).collect::<Vec<_>>())?;
        reports.push(GroupReport {
            name: name.clone(),
            videos,
            centers: center_reports,
            pooled: PooledReport { cm, metrics },
            aggregate,
        });
    }
    let total_frames = total.total();
    Ok(MetricsReport {
        threshold,
        groups: reports,
        total_frames,
        fn_count: total.fn_,
        fn_rate: if total_frames == 0 {
            0.0
        } else {
            total.fn_ as f64 / total_frames as f64
        },
    })
}

/// Predicts every video (in parallel, one recurrent state per job) and
/// reports metrics per video, center and group.
pub fn evaluate(
    params: &OoBNetParams<f32>,
    config: &ModelConfig,
    groups: &[(&str, &[AnnotatedSequence])],
    threshold: f64,
    clip_len: usize,
) -> Result<MetricsReport> {
    check_threshold(threshold)?;
    let traced = groups
        .iter()
        .map(|(name, seqs)| {
            let traces = seqs
                .par_iter()
                .map(|s| {
                    Ok(LabeledTrace {
                        video_id: s.video_id.clone(),
                        center: s.center_id.clone(),
                        probabilities: predict_frames(params, config, &s.frames, clip_len)?,
                        labels: s.labels.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((name.to_string(), traces))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_traces(&traced, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(id: &str, center: &str, probs: &[f64], labels: &[u8]) -> LabeledTrace {
        LabeledTrace {
            video_id: id.into(),
            center: center.into(),
            probabilities: probs.to_vec(),
            labels: labels.to_vec(),
        }
    }

    #[test]
    fn perfect_predictions() {
        let groups = vec![(
            "test".to_string(),
            vec![
                trace("a", "x", &[0.9, 0.1, 0.8], &[1, 0, 1]),
                trace("b", "y", &[0.2, 0.7], &[0, 1]),
            ],
        )];
        let r = evaluate_traces(&groups, 0.5).unwrap();
        let g = &r.groups[0];
        assert_eq!(g.pooled.cm, ConfusionMatrix { tp: 3, fp: 0, tn: 2, fn_: 0 });
        let m = g.pooled.metrics;
        assert_eq!((m.roc_auc, m.ap, m.f1, m.precision, m.recall), (Some(1.0), Some(1.0), 1.0, 1.0, 1.0));
        assert_eq!(g.centers.len(), 2);
        assert_eq!(g.aggregate.f1.sd, 0.0);
        assert_eq!((r.fn_count, r.fn_rate, r.total_frames), (0, 0.0, 5));
    }

    #[test]
    fn single_class_video_reports_null_auc() {
        let groups = vec![(
            "ext".to_string(),
            vec![trace("a", "x", &[0.2, 0.3], &[0, 0]), trace("b", "x", &[0.9, 0.4], &[1, 1])],
        )];
        let r = evaluate_traces(&groups, 0.5).unwrap();
        assert_eq!(r.groups[0].videos[0].metrics.roc_auc, None);
        assert_eq!(r.groups[0].videos[1].metrics.ap, Some(1.0));
        assert!(r.groups[0].pooled.metrics.roc_auc.is_some());
        assert_eq!(r.fn_count, 1);
        assert_eq!(r.fn_rate, 0.25);
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        let v = &json["groups"][0]["videos"][0];
        assert!(v["metrics"]["roc_auc"].is_null());
        assert_eq!(v["cm"]["fn"], 0);
        assert_eq!(v["center"], "x");
        assert!(json["groups"][0]["aggregate"]["f1"]["sd"].is_number());
    }

    #[test]
    fn rejects_bad_threshold_and_empty_group() {
        assert!(evaluate_traces(&[], 1.5).is_err());
        assert!(evaluate_traces(&[("g".into(), vec![])], 0.5).is_err());
    }
}
