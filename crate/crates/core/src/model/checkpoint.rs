//! Binary checkpoint format.
//!
//! All integers little-endian:
//!
//! ```text
//! "OOBN"                       magic, 4 bytes
//! u32 version                  = 1
//! u32 len, len bytes           UTF-8 JSON of the ModelConfig
//! u32 count                    number of tensors
//! count × {
//!     u16 len, len bytes       UTF-8 parameter name
//!     u8 rank
//!     u32 × rank               dimensions
//!     f32 × product(dims)      data
//! }
//! ```
//!
//! Tensors are written in lexicographic name order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{ModelConfig, OoBNetParams};
use crate::error::{CheckpointError, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OOBN";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(params: &OoBNetParams<f32>, config: &ModelConfig) -> Result<Vec<u8>> {
    let config_json = serde_json::to_string(config)?;
    let mut out = Vec::with_capacity(64 + config_json.len() + params.num_scalars() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(format!(
                "need {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            ))
            .into());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        std::str::from_utf8(self.take(n, what)?)
            .map_err(|_| CheckpointError::Inconsistent(format!("{what} is not UTF-8")).into())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(OoBNetParams<f32>, ModelConfig)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let config_len = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_str(r.utf8(config_len, "config")?)
        .map_err(|e| CheckpointError::Inconsistent(format!("config JSON: {e}")))?;
    config
        .validate()
        .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;

    let count = r.u32("tensor count")? as usize;
    let mut tensors = BTreeMap::new();
    let mut previous: Option<&str> = None;
    for i in 0..count {
        let what = format!("tensor {i} of {count}");
        let name_len = r.u16(&what)? as usize;
        let name = r.utf8(name_len, &what)?;
        if previous.is_some_and(|p| p >= name) {
            return Err(CheckpointError::Inconsistent(format!(
                "tensor {name:?} out of lexicographic order"
            ))
            .into());
        }
        previous = Some(name);
        let rank = r.u8(&what)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&what)? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, &what)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Inconsistent(format!("{name}: {e}")))?;
        tensors.insert(name.to_string(), tensor);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Truncated(format!(
            "{} bytes after the {count} declared tensors",
            bytes.len() - r.pos
        ))
        .into());
    }
    let params = OoBNetParams::from_tensors(&config, tensors)
        .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;
    Ok((params, config))
}

pub fn save_checkpoint(params: &OoBNetParams<f32>, config: &ModelConfig, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params, config)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(OoBNetParams<f32>, ModelConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
