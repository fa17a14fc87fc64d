//! Split files and on-disk video directories.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::image::{decode_ppm, preprocess};
use super::{load_annotations, sample_1fps, AnnotatedSequence, FrameManifest, ManifestRow, SequenceSummary};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One video listed in a split file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitEntry {
    pub group: String,
    pub dir: PathBuf,
    pub video_id: String,
    pub center_id: String,
}

const KNOWN_GROUPS: [&str; 3] = ["train", "validation", "test"];

fn group_rank(name: &str) -> usize {
    KNOWN_GROUPS.iter().position(|&g| g == name).unwrap_or(KNOWN_GROUPS.len())
}

/// Reads a split file mapping group name → video directories (relative to
/// `data_dir`). An entry of the form `center/video` assigns the video to
/// `center`; a bare name belongs to a center named after its group.
///
/// Groups come back as train, validation, test, then the rest by name.
pub fn read_split_file(data_dir: &Path, split_path: &Path) -> Result<Vec<(String, Vec<SplitEntry>)>> {
    let text = fs::read_to_string(split_path).map_err(|e| Error::io(split_path, e))?;
    let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(&text).map_err(|e| Error::Data {
        path: split_path.to_path_buf(),
        message: format!("split file must map group names to lists of video directories: {e}"),
    })?;
    let mut seen = HashSet::new();
    let mut groups: Vec<(String, Vec<SplitEntry>)> = Vec::new();
    for (group, dirs) in raw {
        let mut entries = Vec::with_capacity(dirs.len());
        for rel in dirs {
            if !seen.insert(rel.clone()) {
                return Err(Error::Data {
                    path: split_path.to_path_buf(),
                    message: format!("video {rel:?} appears in more than one split"),
                });
            }
            let parts: Vec<&str> = rel.split('/').filter(|p| !p.is_empty()).collect();
            let center_id = if parts.len() >= 2 {
                parts[0].to_string()
            } else {
                group.clone()
            };
            entries.push(SplitEntry {
                group: group.clone(),
                dir: data_dir.join(&rel),
                video_id: rel,
                center_id,
            });
        }
        groups.push((group, entries));
    }
    groups.sort_by(|a, b| group_rank(&a.0).cmp(&group_rank(&b.0)).then_with(|| a.0.cmp(&b.0)));
    Ok(groups)
}

/// A video directory with its manifest already sampled to 1 fps.
#[derive(Debug, Clone)]
pub struct VideoSource {
    pub dir: PathBuf,
    pub manifest: FrameManifest,
    /// Manifest row indices kept by 1 fps sampling.
    pub selected: Vec<usize>,
}

pub fn open_video(dir: &Path, video_id: &str, center_id: &str) -> Result<VideoSource> {
    let path = dir.join("manifest.csv");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = FrameManifest::parse(&bytes, video_id, center_id).map_err(|e| Error::Data {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if manifest.rows.is_empty() {
        return Err(Error::Data {
            path,
            message: "manifest lists no frames".into(),
        });
    }
    let selected = sample_1fps(&manifest);
    Ok(VideoSource {
        dir: dir.to_path_buf(),
        manifest,
        selected,
    })
}

impl VideoSource {
    pub fn video_id(&self) -> &str {
        &self.manifest.video_id
    }

    pub fn center_id(&self) -> &str {
        &self.manifest.center_id
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    /// Manifest rows of the sampled frames.
    pub fn sampled_rows(&self) -> Vec<ManifestRow> {
        self.selected.iter().map(|&i| self.manifest.rows[i].clone()).collect()
    }

    pub fn frame_paths(&self) -> Vec<PathBuf> {
        self.selected
            .iter()
            .map(|&i| self.dir.join(&self.manifest.rows[i].path))
            .collect()
    }

    pub fn labels_path(&self) -> PathBuf {
        self.dir.join("labels.csv")
    }

    pub fn labels(&self) -> Result<Vec<u8>> {
        let path = self.labels_path();
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        load_annotations(&bytes, self.len()).map_err(|e| Error::Data {
            path,
            message: e.to_string(),
        })
    }

    /// Decodes and resizes every sampled frame.
    pub fn load_frames(&self, input_size: usize) -> Result<Vec<Tensor<f32>>> {
        self.frame_paths()
            .par_iter()
            .map(|path| {
                let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
                let image = decode_ppm(&bytes).map_err(|e| Error::Data {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                Ok(preprocess(&image, input_size))
            })
            .collect()
    }

    pub fn load_sequence(&self, input_size: usize) -> Result<AnnotatedSequence> {
        let labels = self.labels()?;
        let frames = self.load_frames(input_size)?;
        AnnotatedSequence::new(self.video_id(), self.center_id(), frames, labels)
    }

    /// Frame and out-of-body counts, read from the labels only.
    pub fn summary(&self) -> Result<SequenceSummary> {
        let labels = self.labels()?;
        Ok(SequenceSummary {
            video_id: self.video_id().to_string(),
            center_id: self.center_id().to_string(),
            frames: labels.len(),
            oob_frames: labels.iter().filter(|&&l| l == 1).count(),
        })
    }
}

/// Decoded train/validation/test sequences plus any further (external) groups.
#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<AnnotatedSequence>,
    pub validation: Vec<AnnotatedSequence>,
    pub test: Vec<AnnotatedSequence>,
    pub external: Vec<(String, Vec<AnnotatedSequence>)>,
}

impl DatasetSplit {
    /// Test and external groups, in that order.
    pub fn evaluation_groups(&self) -> Vec<(&str, &[AnnotatedSequence])> {
        let mut groups = Vec::new();
        if !self.test.is_empty() {
            groups.push(("test", self.test.as_slice()));
        }
        for (name, seqs) in &self.external {
            groups.push((name.as_str(), seqs.as_slice()));
        }
        groups
    }
}

pub fn load_dataset(data_dir: &Path, split_path: &Path, input_size: usize) -> Result<DatasetSplit> {
    let mut split = DatasetSplit::default();
    for (group, entries) in read_split_file(data_dir, split_path)? {
        let seqs = entries
            .iter()
            .map(|e| open_video(&e.dir, &e.video_id, &e.center_id)?.load_sequence(input_size))
            .collect::<Result<Vec<_>>>()?;
        match group.as_str() {
            "train" => split.train = seqs,
            "validation" => split.validation = seqs,
            "test" => split.test = seqs,
            _ => split.external.push((group, seqs)),
        }
    }
    Ok(split)
}
