//! Seeded synthetic endoscopy-like videos.
//!
//! Inside-body frames are dim, red-dominant textures whose phase drifts
//! slowly over time. Out-of-body frames are bright scenes with sharp,
//! high-contrast rectangles. Each video starts outside the body and
//! alternates between runs of the two classes.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{encode_ppm, preprocess, write_annotations, write_manifest, AnnotatedSequence, DatasetSplit, ManifestRow, RgbImage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthGroup {
    pub name: String,
    pub center: String,
    pub videos: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub groups: Vec<SynthGroup>,
    /// Video lengths in 1 fps frames are drawn from `min_frames..=max_frames`.
    pub min_frames: usize,
    pub max_frames: usize,
    /// Side length of rendered frames.
    pub frame_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let group = |name: &str, videos| SynthGroup {
            name: name.into(),
            center: "internal".into(),
            videos,
        };
        SynthConfig {
            seed: 0,
            groups: vec![group("train", 20), group("validation", 10), group("test", 10)],
            min_frames: 270,
            max_frames: 330,
            frame_size: 64,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_frames < 16 || self.min_frames > self.max_frames {
            return Err(Error::InvalidConfig(format!(
                "need 16 <= min_frames <= max_frames, got {}..={}",
                self.min_frames, self.max_frames
            )));
        }
        if self.frame_size < 8 {
            return Err(Error::InvalidConfig(format!("frame_size must be >= 8, got {}", self.frame_size)));
        }
        if self.groups.is_empty() || self.groups.iter().any(|g| g.name.is_empty() || g.center.is_empty()) {
            return Err(Error::InvalidConfig("groups need non-empty names and centers".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Run {
    start: usize,
    end: usize,
    oob: bool,
    seed: u64,
}

/// A generated video: labels plus enough state to render any frame.
#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub video_id: String,
    pub center_id: String,
    pub group: String,
    pub labels: Vec<u8>,
    runs: Vec<Run>,
    seed: u64,
    base_brightness: f64,
    frequencies: [f64; 3],
    phases: [f64; 3],
    drift: [f64; 3],
}

impl SynthVideo {
    fn generate(video_id: String, group: &SynthGroup, seed: u64, config: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(config.min_frames..=config.max_frames);
        let mut runs = Vec::new();
        let (mut at, mut oob) = (0, true);
        while at < n {
            let len = match (oob, at) {
                (true, 0) => rng.gen_range(3..=10),
                (true, _) => rng.gen_range(4..=20),
                (false, _) => rng.gen_range(40..=110),
            };
            let end = (at + len).min(n);
            runs.push(Run {
                start: at,
                end,
                oob,
                seed: rng.gen(),
            });
            at = end;
            oob = !oob;
        }
        let mut labels = vec![0u8; n];
        for r in runs.iter().filter(|r| r.oob) {
            labels[r.start..r.end].fill(1);
        }
        SynthVideo {
            video_id,
            center_id: group.center.clone(),
            group: group.name.clone(),
            labels,
            runs,
            seed,
            base_brightness: rng.gen_range(0.32..0.48),
            frequencies: [rng.gen_range(1.5..4.0), rng.gen_range(1.5..4.0), rng.gen_range(3.0..6.0)],
            phases: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
            drift: [rng.gen_range(0.01..0.05), rng.gen_range(-0.05..-0.01), rng.gen_range(0.01..0.04)],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Renders the scene at time `t` seconds; `t` in `[k, k + 1)` belongs to frame `k`.
    pub fn render(&self, t: f64, size: usize) -> RgbImage {
        let k = (t.max(0.0) as usize).min(self.len() - 1);
        let run = self.runs.iter().find(|r| k < r.end).expect("runs cover the video");
        let mut noise = ChaCha8Rng::seed_from_u64(self.seed ^ (t * 1000.0) as u64 ^ 0x5eed_f00d);
        let mut data = Vec::with_capacity(size * size * 3);
        if run.oob {
            let scene = OutsideScene::new(run.seed);
            let dt = t - run.start as f64;
            for y in 0..size {
                for x in 0..size {
                    let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
                    let rgb = scene.color(u, v, dt);
                    for c in rgb {
                        let jitter = noise.gen_range(-4.0..=4.0);
                        data.push((c * 255.0 + jitter).round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
        } else {
            let [f1, f2, f3] = self.frequencies;
            let ph: Vec<f64> = (0..3).map(|i| self.phases[i] + self.drift[i] * t).collect();
            let b = self.base_brightness * (1.0 + 0.1 * (0.2 * t).sin());
            for y in 0..size {
                for x in 0..size {
                    let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
                    let tex = 0.5
                        + 0.3 * (TAU * (f1 * u + ph[0])).sin() * (TAU * (f2 * v + ph[1])).sin()
                        + 0.2 * (TAU * (f3 * (u + v) + ph[2])).sin();
                    let rgb = [b * (0.7 + 0.3 * tex), b * 0.35 * tex, b * 0.3 * tex];
                    for c in rgb {
                        let jitter = noise.gen_range(-3.0..=3.0);
                        data.push((c * 255.0 + jitter).round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
        }
        RgbImage::new(size, size, data)
    }

    /// The 1 fps frame `k` at `size`.
    pub fn frame(&self, k: usize, size: usize) -> RgbImage {
        self.render(k as f64, size)
    }
}

struct OutsideScene {
    background: [f64; 3],
    rects: Vec<([f64; 4], [f64; 3], [f64; 2])>,
}

impl OutsideScene {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let level = rng.gen_range(0.6..0.85);
        let background = [
            level * rng.gen_range(0.85..1.0),
            level * rng.gen_range(0.9..1.0),
            level * rng.gen_range(0.9..1.05),
        ];
        let count = rng.gen_range(3..=6);
        let rects = (0..count)
            .map(|_| {
                let (w, h) = (rng.gen_range(0.1..0.45), rng.gen_range(0.1..0.45));
                let (x, y) = (rng.gen_range(0.0..1.0 - w), rng.gen_range(0.0..1.0 - h));
                let color = if rng.gen_bool(0.5) {
                    [rng.gen_range(0.0..0.15), rng.gen_range(0.0..0.15), rng.gen_range(0.0..0.2)]
                } else {
                    [rng.gen_range(0.2..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.6..1.0)]
                };
                let velocity = [rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01)];
                ([x, y, w, h], color, velocity)
            })
            .collect();
        OutsideScene { background, rects }
    }

    fn color(&self, u: f64, v: f64, dt: f64) -> [f64; 3] {
        let mut c = self.background;
        for ([x, y, w, h], color, [vx, vy]) in &self.rects {
            let (x0, y0) = (x + vx * dt, y + vy * dt);
            if u >= x0 && u < x0 + w && v >= y0 && v < y0 + h {
                c = *color;
            }
        }
        c
    }
}

/// Deterministically lays out every video of `config`.
pub fn synth_videos(config: &SynthConfig) -> Result<Vec<SynthVideo>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut videos = Vec::new();
    for group in &config.groups {
        for _ in 0..group.videos {
            let id = format!("vid_{:03}", videos.len());
            videos.push(SynthVideo::generate(id, group, rng.gen(), config));
        }
    }
    Ok(videos)
}

/// Generates the dataset in memory at model resolution `input_size`. Video
/// ids are `center/video`, as when read back from [`write_dataset`] output.
pub fn generate_dataset(config: &SynthConfig, input_size: usize) -> Result<DatasetSplit> {
    let videos = synth_videos(config)?;
    let seqs: Vec<(String, AnnotatedSequence)> = videos
        .par_iter()
        .map(|v| {
            let frames = (0..v.len())
                .map(|k| preprocess(&v.frame(k, config.frame_size), input_size))
                .collect();
            let id = format!("{}/{}", v.center_id, v.video_id);
            let seq = AnnotatedSequence::new(id, &v.center_id, frames, v.labels.clone())?;
            Ok((v.group.clone(), seq))
        })
        .collect::<Result<_>>()?;
    let mut split = DatasetSplit::default();
    for (group, seq) in seqs {
        match group.as_str() {
            "train" => split.train.push(seq),
            "validation" => split.validation.push(seq),
            "test" => split.test.push(seq),
            _ => match split.external.iter_mut().find(|(g, _)| *g == group) {
                Some((_, list)) => list.push(seq),
                None => split.external.push((group, vec![seq])),
            },
        }
    }
    Ok(split)
}

/// Writes the dataset under `root`: `<center>/<video>/{frames/, manifest.csv,
/// labels.csv}` plus `split.json`, whose path is returned.
///
/// Frames are stored at 2 fps with jittered timestamps, so ingestion's 1 fps
/// sampling picks every other file.
pub fn write_dataset(root: &Path, config: &SynthConfig) -> Result<PathBuf> {
    let videos = synth_videos(config)?;
    videos.par_iter().try_for_each(|v| write_video(root, v, config))?;
    let mut split: std::collections::BTreeMap<&str, Vec<String>> = Default::default();
    for v in &videos {
        split.entry(&v.group).or_default().push(format!("{}/{}", v.center_id, v.video_id));
    }
    let path = root.join("split.json");
    let json = serde_json::to_vec_pretty(&split)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn write_video(root: &Path, video: &SynthVideo, config: &SynthConfig) -> Result<()> {
    let dir = root.join(&video.center_id).join(&video.video_id);
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let mut jitter = ChaCha8Rng::seed_from_u64(video.seed ^ 0x7157);
    let mut rows = Vec::with_capacity(video.len() * 2);
    for half in 0..video.len() * 2 {
        let t = half as f64 / 2.0;
        let timestamp_ms = (half as u64 * 500 + 40).saturating_add_signed(jitter.gen_range(-40..=40));
        let name = format!("frames/{half:06}.ppm");
        let path = dir.join(&name);
        fs::write(&path, encode_ppm(&video.render(t, config.frame_size))).map_err(|e| Error::io(&path, e))?;
        rows.push(ManifestRow { timestamp_ms, path: name });
    }
    let manifest = dir.join("manifest.csv");
    fs::write(&manifest, write_manifest(&rows)?).map_err(|e| Error::io(&manifest, e))?;
    let labels = dir.join("labels.csv");
    fs::write(&labels, write_annotations(&video.labels)?).map_err(|e| Error::io(&labels, e))?;
    Ok(())
}
