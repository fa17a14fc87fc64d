//! 8-bit RGB frames: binary PPM coding and bilinear resizing.

use crate::error::{PpmError, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB pixels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    /// Panics if `data.len() != width * height * 3`.
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height * 3, "RGB buffer size");
        RgbImage { width, height, data }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        RgbImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Planar `[3, H, W]` tensor with values scaled to [0, 1].
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.width * self.height;
        Tensor::from_fn(vec![3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            self.data[p * 3 + c] as f32 / 255.0
        })
    }
}

fn skip_space_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    *pos = skip_space_and_comments(bytes, *pos);
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(PpmError::Header(format!("missing {what}")).into());
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| PpmError::Header(format!("{what} out of range")).into())
}

/// Decodes a binary (`P6`) PPM with maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(PpmError::BadMagic(found).into());
    }
    let mut pos = 2;
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(PpmError::UnsupportedMaxval(maxval).into());
    }
    if width == 0 || height == 0 {
        return Err(PpmError::Header(format!("empty image {width}x{height}")).into());
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(PpmError::Header("no whitespace after maxval".into()).into()),
    }
    let needed = width as usize * height as usize * 3;
    let found = bytes.len() - pos;
    if found < needed {
        return Err(PpmError::ShortData { needed, found }.into());
    }
    Ok(RgbImage::new(
        width as usize,
        height as usize,
        bytes[pos..pos + needed].to_vec(),
    ))
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

/// Bilinear resize with half-pixel centers and edge clamping; results are
/// rounded half-up to 8 bits.
pub fn resize_bilinear(image: &RgbImage, out_width: usize, out_height: usize) -> RgbImage {
    if image.width == out_width && image.height == out_height {
        return image.clone();
    }
    let taps = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f64)> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(in_len - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = taps(out_width, image.width);
    let ys = taps(out_height, image.height);
    let mut data = Vec::with_capacity(out_width * out_height * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let (a, b) = (image.pixel(x0, y0), image.pixel(x1, y0));
            let (c, d) = (image.pixel(x0, y1), image.pixel(x1, y1));
            for ch in 0..3 {
                let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
                let bottom = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                data.push((v + 0.5).floor().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RgbImage::new(out_width, out_height, data)
}

/// Resize to the model resolution and scale to [0, 1].
pub fn preprocess(image: &RgbImage, size: usize) -> Tensor<f32> {
    resize_bilinear(image, size, size).to_tensor()
}
