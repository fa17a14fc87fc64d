//! Frame ingestion: manifests, 1 fps sampling, annotations and dataset
//! statistics.
//!
//! A video is a directory holding `manifest.csv` (`timestamp_ms,path`),
//! `labels.csv` (`frame_index,label`, indexed after 1 fps sampling) and the
//! frame images under `frames/`.

use serde::Serialize;

use crate::error::{AnnotationError, Error, Result};
use crate::metrics::round2;
use crate::tensor::Tensor;

mod dataset;
pub mod image;

pub use dataset::{load_dataset, open_video, read_split_file, DatasetSplit, SplitEntry, VideoSource};
pub use image::{decode_ppm, encode_ppm, preprocess, resize_bilinear, RgbImage};

pub const MANIFEST_HEADER: [&str; 2] = ["timestamp_ms", "path"];
pub const LABELS_HEADER: [&str; 2] = ["frame_index", "label"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestRow {
    pub timestamp_ms: u64,
    pub path: String,
}

/// Timestamped frame files of one video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameManifest {
    pub video_id: String,
    pub center_id: String,
    pub rows: Vec<ManifestRow>,
}

fn check_header(reader: &mut csv::Reader<&[u8]>, expected: [&str; 2], what: &str) -> Result<()> {
    let header = reader.headers()?;
    if header.iter().map(str::trim).ne(expected) {
        return Err(Error::InvalidArgument(format!(
            "{what} header must be \"{}\", got {:?}",
            expected.join(","),
            header.iter().collect::<Vec<_>>()
        )));
    }
    Ok(())
}

impl FrameManifest {
    pub fn parse(csv_bytes: &[u8], video_id: &str, center_id: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(csv_bytes);
        check_header(&mut reader, MANIFEST_HEADER, "manifest")?;
        let mut rows: Vec<ManifestRow> = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let bad = |m: String| Error::InvalidArgument(format!("manifest row {}: {m}", i + 1));
            if record.len() != 2 {
                return Err(bad(format!("expected 2 fields, got {}", record.len())));
            }
            let timestamp_ms: u64 = record[0]
                .parse()
                .map_err(|_| bad(format!("bad timestamp {:?}", &record[0])))?;
            let path = record[1].to_string();
            if path.is_empty() {
                return Err(bad("empty path".into()));
            }
            if let Some(prev) = rows.last() {
                if timestamp_ms <= prev.timestamp_ms {
                    return Err(bad(format!(
                        "timestamp {timestamp_ms} not after {}",
                        prev.timestamp_ms
                    )));
                }
            }
            rows.push(ManifestRow { timestamp_ms, path });
        }
        Ok(FrameManifest {
            video_id: video_id.to_string(),
            center_id: center_id.to_string(),
            rows,
        })
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        write_manifest(&self.rows)
    }
}

pub fn write_manifest(rows: &[ManifestRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER)?;
    for r in rows {
        w.write_record([r.timestamp_ms.to_string(), r.path.clone()])?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Indices of the rows nearest to each whole second `0, 1000, 2000, ...` ms
/// up to the last timestamp, ties going to the earlier row. Repeated picks
/// collapse so the result is strictly increasing.
pub fn sample_1fps(manifest: &FrameManifest) -> Vec<usize> {
    let ts: Vec<u64> = manifest.rows.iter().map(|r| r.timestamp_ms).collect();
    let Some(&last) = ts.last() else {
        return Vec::new();
    };
    let mut picked: Vec<usize> = Vec::new();
    for s in 0..=last / 1000 {
        let target = s * 1000;
        let after = ts.partition_point(|&t| t < target);
        let best = if after == 0 {
            0
        } else if after == ts.len() {
            ts.len() - 1
        } else if target - ts[after - 1] <= ts[after] - target {
            after - 1
        } else {
            after
        };
        if picked.last() != Some(&best) {
            picked.push(best);
        }
    }
    picked
}

/// Dense per-frame labels (1 = out-of-body) from an annotation CSV.
pub fn load_annotations(csv_bytes: &[u8], expected_count: usize) -> Result<Vec<u8>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(csv_bytes);
    check_header(&mut reader, LABELS_HEADER, "annotation")?;
    let mut labels: Vec<Option<u8>> = vec![None; expected_count];
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        if record.len() != 2 {
            return Err(AnnotationError::Malformed {
                row,
                message: format!("expected 2 fields, got {}", record.len()),
            }
            .into());
        }
        let index: usize = record[0].parse().map_err(|_| AnnotationError::Malformed {
            row,
            message: format!("bad frame index {:?}", &record[0]),
        })?;
        let label = match &record[1] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(AnnotationError::NonBinary {
                    row,
                    label: other.to_string(),
                }
                .into())
            }
        };
        let slot = labels.get_mut(index).ok_or(AnnotationError::IndexOutOfRange {
            index,
            expected: expected_count,
        })?;
        if slot.replace(label).is_some() {
            return Err(AnnotationError::DuplicateIndex(index).into());
        }
        rows += 1;
    }
    if rows != expected_count {
        return Err(AnnotationError::CountMismatch {
            expected: expected_count,
            found: rows,
        }
        .into());
    }
    Ok(labels.into_iter().map(|l| l.unwrap_or(0)).collect())
}

pub fn write_annotations(labels: &[u8]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LABELS_HEADER)?;
    for (i, l) in labels.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Decoded, model-resolution frames of one video with their labels.
#[derive(Debug, Clone)]
pub struct AnnotatedSequence {
    pub video_id: String,
    pub center_id: String,
    /// `[3, S, S]` tensors in [0, 1].
    pub frames: Vec<Tensor<f32>>,
    pub labels: Vec<u8>,
}

impl AnnotatedSequence {
    pub fn new(video_id: impl Into<String>, center_id: impl Into<String>, frames: Vec<Tensor<f32>>, labels: Vec<u8>) -> Result<Self> {
        let video_id = video_id.into();
        if frames.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{video_id}: {} frames but {} labels",
                frames.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::InvalidArgument(format!("{video_id}: labels must be 0 or 1")));
        }
        if let Some(shape) = frames.first().map(|f| f.shape().to_vec()) {
            if shape.len() != 3 || shape[0] != 3 || frames.iter().any(|f| f.shape() != shape.as_slice()) {
                return Err(Error::InvalidArgument(format!(
                    "{video_id}: frames must all be [3, S, S]"
                )));
            }
        }
        Ok(AnnotatedSequence {
            video_id,
            center_id: center_id.into(),
            frames,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn summary(&self) -> SequenceSummary {
        SequenceSummary {
            video_id: self.video_id.clone(),
            center_id: self.center_id.clone(),
            frames: self.labels.len(),
            oob_frames: self.labels.iter().filter(|&&l| l == 1).count(),
        }
    }
}

/// Frame counts of one video, enough for dataset statistics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceSummary {
    pub video_id: String,
    pub center_id: String,
    /// Frames after 1 fps sampling, i.e. duration in seconds.
    pub frames: usize,
    pub oob_frames: usize,
}

/// `100 · oob / total`, two decimals; 0 for an empty set.
pub fn oob_percentage(oob: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        round2(100.0 * oob as f64 / total as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsRow {
    pub dataset: String,
    pub videos: usize,
    pub min_duration_min: f64,
    pub max_duration_min: f64,
    pub avg_duration_min: f64,
    pub total_frames: usize,
    pub oob_frames: usize,
    pub oob_percent: f64,
}

/// Summary row for one group of videos; durations assume 1 fps.
pub fn dataset_stats(name: &str, videos: &[SequenceSummary]) -> StatsRow {
    let minutes: Vec<f64> = videos.iter().map(|v| v.frames as f64 / 60.0).collect();
    let total_frames = videos.iter().map(|v| v.frames).sum();
    let oob_frames = videos.iter().map(|v| v.oob_frames).sum();
    let (min, max) = minutes
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &m| (lo.min(m), hi.max(m)));
    StatsRow {
        dataset: name.to_string(),
        videos: videos.len(),
        min_duration_min: if videos.is_empty() { 0.0 } else { round2(min) },
        max_duration_min: if videos.is_empty() { 0.0 } else { round2(max) },
        avg_duration_min: if videos.is_empty() {
            0.0
        } else {
            round2(minutes.iter().sum::<f64>() / minutes.len() as f64)
        },
        total_frames,
        oob_frames,
        oob_percent: oob_percentage(oob_frames, total_frames),
    }
}

/// One row per group, followed by one row per center for groups that span
/// more than one center.
pub fn dataset_stats_by_center(groups: &[(String, Vec<SequenceSummary>)]) -> Vec<StatsRow> {
    let mut rows = Vec::new();
    for (name, videos) in groups {
        rows.push(dataset_stats(name, videos));
        let mut centers: Vec<&str> = videos.iter().map(|v| v.center_id.as_str()).collect();
        centers.sort_unstable();
        centers.dedup();
        if centers.len() > 1 {
            for center in centers {
                let subset: Vec<SequenceSummary> =
                    videos.iter().filter(|v| v.center_id == center).cloned().collect();
                rows.push(dataset_stats(center, &subset));
            }
        }
    }
    rows
}

pub fn stats_csv(rows: &[StatsRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "dataset",
        "videos",
        "min_duration_min",
        "max_duration_min",
        "avg_duration_min",
        "total_frames",
        "oob_frames",
        "oob_percent",
    ])?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.videos.to_string(),
            format!("{:.2}", r.min_duration_min),
            format!("{:.2}", r.max_duration_min),
            format!("{:.2}", r.avg_duration_min),
            r.total_frames.to_string(),
            r.oob_frames.to_string(),
            format!("{:.2}", r.oob_percent),
        ])?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn manifest(ts: &[u64]) -> FrameManifest {
        FrameManifest {
            video_id: "v".into(),
            center_id: "c".into(),
            rows: ts
                .iter()
                .enumerate()
                .map(|(i, &t)| ManifestRow {
                    timestamp_ms: t,
                    path: format!("frames/{i}.ppm"),
                })
                .collect(),
        }
    }

    #[test]
    fn sampling_examples() {
        assert_eq!(sample_1fps(&manifest(&[0, 1000, 2000])), vec![0, 1, 2]);
        assert_eq!(sample_1fps(&manifest(&[0])), vec![0]);
        assert_eq!(sample_1fps(&manifest(&[0, 400, 900, 1600, 2100])), vec![0, 2, 4]);
        // 1000 ms is equidistant from 500 and 1500; the earlier frame wins.
        assert_eq!(sample_1fps(&manifest(&[0, 500, 1500])), vec![0, 1]);
        assert_eq!(sample_1fps(&manifest(&[4200, 6100])), vec![0, 1]);
    }

    #[test]
    fn manifest_parse_and_validate() {
        let m = FrameManifest::parse(b"timestamp_ms,path\n0,frames/a.ppm\n1000,frames/b.ppm\n", "v", "c").unwrap();
        assert_eq!(m.rows.len(), 2);
        assert_eq!(FrameManifest::parse(&m.to_csv().unwrap(), "v", "c").unwrap(), m);
        assert!(FrameManifest::parse(b"timestamp_ms,path\n5,a\n5,b\n", "v", "c").is_err());
        assert!(FrameManifest::parse(b"timestamp_ms,path\n5,\n", "v", "c").is_err());
        assert!(FrameManifest::parse(b"time,path\n5,a\n", "v", "c").is_err());
    }

    #[test]
    fn annotation_examples() {
        let csv = b"frame_index,label\n0,0\n1,1\n2,1\n";
        assert_eq!(load_annotations(csv, 3).unwrap(), vec![0, 1, 1]);
        let err = load_annotations(b"frame_index,label\n0,2\n", 1).unwrap_err();
        assert!(matches!(err, Error::Annotation(AnnotationError::NonBinary { .. })));
        let err = load_annotations(b"frame_index,label\n0,0\n1,1\n", 3).unwrap_err();
        assert!(matches!(
            err,
            Error::Annotation(AnnotationError::CountMismatch { expected: 3, found: 2 })
        ));
        let err = load_annotations(b"frame_index,label\n0,0\n0,1\n", 2).unwrap_err();
        assert!(matches!(err, Error::Annotation(AnnotationError::DuplicateIndex(0))));
        let err = load_annotations(b"frame_index,label\n5,0\n", 1).unwrap_err();
        assert!(matches!(err, Error::Annotation(AnnotationError::IndexOutOfRange { .. })));
        // Rows may come in any order.
        assert_eq!(load_annotations(b"frame_index,label\n1,1\n0,0\n", 2).unwrap(), vec![0, 1]);
        assert_eq!(load_annotations(&write_annotations(&[1, 0, 1]).unwrap(), 3).unwrap(), vec![1, 0, 1]);
    }

    #[test]
    fn percentages() {
        assert_eq!(oob_percentage(57_203, 161_870), 35.34);
        assert_eq!(oob_percentage(2_259, 54_385), 4.15);
        assert_eq!(oob_percentage(0, 100), 0.0);
    }

    #[test]
    fn stats_row() {
        let vids = vec![
            SequenceSummary { video_id: "a".into(), center_id: "x".into(), frames: 120, oob_frames: 30 },
            SequenceSummary { video_id: "b".into(), center_id: "y".into(), frames: 60, oob_frames: 0 },
        ];
        let row = dataset_stats("train", &vids);
        assert_eq!(row.videos, 2);
        assert_eq!((row.min_duration_min, row.max_duration_min, row.avg_duration_min), (1.0, 2.0, 1.5));
        assert_eq!(row.oob_percent, 16.67);
        let rows = dataset_stats_by_center(&[("train".into(), vids)]);
        assert_eq!(rows.len(), 3);
        let csv = String::from_utf8(stats_csv(&rows).unwrap()).unwrap();
        assert!(csv.starts_with("dataset,videos,min_duration_min"));
        assert!(csv.contains("train,2,1.00,2.00,1.50,180,30,16.67"));
    }

    proptest! {
        #[test]
        fn sampling_strictly_increasing(gaps in prop::collection::vec(1u64..3000, 1..60), start in 0u64..5000) {
            let mut ts = Vec::new();
            let mut t = start;
            for g in gaps {
                ts.push(t);
                t += g;
            }
            let m = manifest(&ts);
            let picked = sample_1fps(&m);
            prop_assert!(!picked.is_empty());
            prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(picked.len() as u64 <= ts.last().unwrap() / 1000 + 1);
        }
    }
}
