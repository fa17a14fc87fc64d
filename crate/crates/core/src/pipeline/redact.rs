use std::fs;
use std::path::Path;

use super::{flatten_segments, RedactionMode, RedactionPolicy, Segment};
use crate::data::{decode_ppm, encode_ppm, write_manifest, ManifestRow, RgbImage};
use crate::error::{Error, Result};

/// What [`apply_redaction`] wrote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RedactionOutcome {
    /// Rows of the output `manifest.csv`.
    pub manifest: Vec<ManifestRow>,
    /// Frames blacked out or blurred.
    pub obscured: usize,
    pub deleted: usize,
}

fn box_pass(src: &[u32], w: usize, h: usize, k: usize, horizontal: bool) -> Vec<u32> {
    let r = (k / 2) as isize;
    let mut out = vec![0u32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut sum = 0u32;
                for d in -r..=r {
                    let (sx, sy) = if horizontal {
                        ((x as isize + d).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + d).clamp(0, h as isize - 1) as usize)
                    };
                    sum += src[(sy * w + sx) * 3 + c];
                }
                out[(y * w + x) * 3 + c] = (sum + k as u32 / 2) / k as u32;
            }
        }
    }
    out
}

/// Separable `kernel`×`kernel` box blur with clamped edges, applied twice.
pub fn box_blur(image: &RgbImage, kernel: usize) -> RgbImage {
    let (w, h) = (image.width(), image.height());
    let mut px: Vec<u32> = image.data().iter().map(|&v| v as u32).collect();
    for _ in 0..2 {
        px = box_pass(&px, w, h, kernel, true);
        px = box_pass(&px, w, h, kernel, false);
    }
    RgbImage::new(w, h, px.into_iter().map(|v| v as u8).collect())
}

/// Writes the redacted video to `out_dir` as `frames/NNNNNN.ppm` plus
/// `manifest.csv`. `rows` lists the input frames (paths relative to
/// `source_dir`), one per segment-indexed frame.
///
/// Frames outside every segment are copied byte for byte. Inside a segment a
/// frame is blacked out, blurred or dropped; a blurred frame that comes out
/// identical to its input (a flat image) is blacked out instead, so no
/// redacted frame ever survives unchanged. Output files are numbered
/// consecutively and keep their input timestamps.
pub fn apply_redaction(
    source_dir: &Path,
    rows: &[ManifestRow],
    segments: &[Segment],
    policy: &RedactionPolicy,
    out_dir: &Path,
) -> Result<RedactionOutcome> {
    policy.validate()?;
    if let Some(s) = segments.iter().find(|s| s.start > s.end || s.end >= rows.len()) {
        return Err(Error::InvalidArgument(format!(
            "segment [{}, {}] invalid for {} frames",
            s.start,
            s.end,
            rows.len()
        )));
    }
    let mask = flatten_segments(segments, rows.len());
    let frames_dir = out_dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;

    let mut outcome = RedactionOutcome {
        manifest: Vec::new(),
        obscured: 0,
        deleted: 0,
    };
    for (row, &hit) in rows.iter().zip(&mask) {
        if hit == 1 && policy.mode == RedactionMode::Delete {
            outcome.deleted += 1;
            continue;
        }
        let src = source_dir.join(&row.path);
        let bytes = fs::read(&src).map_err(|e| Error::io(&src, e))?;
        let name = format!("frames/{:06}.ppm", outcome.manifest.len());
        let dst = out_dir.join(&name);
        let data = if hit == 1 {
            outcome.obscured += 1;
            let image = decode_ppm(&bytes).map_err(|e| Error::Data {
                path: src.clone(),
                message: e.to_string(),
            })?;
            let black = || RgbImage::filled(image.width(), image.height(), [0, 0, 0]);
            let redacted = match policy.mode {
                RedactionMode::Blur => {
                    let blurred = box_blur(&image, policy.blur_kernel);
                    if blurred == image {
                        black()
                    } else {
                        blurred
                    }
                }
                _ => black(),
            };
            encode_ppm(&redacted)
        } else {
            bytes
        };
        fs::write(&dst, data).map_err(|e| Error::io(&dst, e))?;
        outcome.manifest.push(ManifestRow {
            timestamp_ms: row.timestamp_ms,
            path: name,
        });
    }
    let manifest_path = out_dir.join("manifest.csv");
    fs::write(&manifest_path, write_manifest(&outcome.manifest)?).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(outcome)
}
