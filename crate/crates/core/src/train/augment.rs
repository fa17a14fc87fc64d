use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Random rotation and contrast jitter applied to training frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Angles are drawn uniformly from `[-max, max]` degrees.
    pub rotation_max_deg: f64,
    /// Contrast factors are drawn uniformly from `[lo, hi]`.
    pub contrast_range: (f64, f64),
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.contrast_range;
        if !(self.rotation_max_deg.is_finite() && self.rotation_max_deg >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "rotation_max_deg must be >= 0, got {}",
                self.rotation_max_deg
            )));
        }
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidConfig(format!("contrast range must satisfy 0 < lo <= hi, got [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// Rotates every channel of `[C, H, W]` by `degrees` about the image center,
/// sampling bilinearly and filling uncovered pixels with zero.
pub fn rotate(frame: &Tensor<f32>, degrees: f64) -> Result<Tensor<f32>> {
    let (c, h, w) = chw(frame)?;
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let src = frame.data();
    let mut out = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let taps = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ];
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                let mut v = 0.0;
                for &(tx, ty, wgt) in &taps {
                    if wgt != 0.0 && tx >= 0.0 && ty >= 0.0 && (tx as usize) < w && (ty as usize) < h {
                        v += wgt * plane[ty as usize * w + tx as usize] as f64;
                    }
                }
                out[ch * h * w + y * w + x] = v as f32;
            }
        }
    }
    Tensor::new(frame.shape().to_vec(), out)
}

/// Scales each channel's deviation from its mean by `factor`, clamped to [0, 1].
pub fn adjust_contrast(frame: &Tensor<f32>, factor: f64) -> Result<Tensor<f32>> {
    let (c, h, w) = chw(frame)?;
    let plane = h * w;
    let mut out = frame.data().to_vec();
    for ch in 0..c {
        let px = &mut out[ch * plane..(ch + 1) * plane];
        let mean = px.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        for v in px {
            *v = ((*v as f64 - mean) * factor + mean).clamp(0.0, 1.0) as f32;
        }
    }
    Tensor::new(frame.shape().to_vec(), out)
}

/// Draws an angle and a contrast factor (always both, so the generator
/// advances identically) and applies them. A zero angle or unit factor
/// leaves the frame untouched.
pub fn augment_frame<R: Rng + ?Sized>(frame: &Tensor<f32>, config: &AugmentConfig, rng: &mut R) -> Result<Tensor<f32>> {
    let m = config.rotation_max_deg;
    let angle = if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
    let (lo, hi) = config.contrast_range;
    let factor = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
    let mut out = if angle != 0.0 { rotate(frame, angle)? } else { frame.clone() };
    if factor != 1.0 {
        out = adjust_contrast(&out, factor)?;
    }
    Ok(out)
}

fn chw(frame: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match *frame.shape() {
        [c, h, w] if h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(Error::shape("augment", format!("expected [C, H, W], got {:?}", frame.shape()))),
    }
}
