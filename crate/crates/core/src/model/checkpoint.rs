//! Checkpoint file layout (all integers little-endian):
//!
//! ```text
//! "RSAE"            4 bytes magic
//! version           u32 (= 1)
//! config length     u64
//! config text       key=value lines (see ModelConfig::to_text)
//! parameters        f64 blobs in ModelParams::tensors order
//! checksum          u64 FNV-1a over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RSAE";
pub const CHECKPOINT_VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let config = params.config.to_text();
    let mut out = Vec::with_capacity(24 + config.len() + 8 * params.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    for (_, t) in params.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 4 + 4 + 8 + 8 {
        return Err(Error::Checksum);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::Checksum);
    }
    let config_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let config_end = 16usize
        .checked_add(config_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::MalformedCheckpoint("config length past end of file".into()))?;
    let text = std::str::from_utf8(&body[16..config_end])
        .map_err(|_| Error::MalformedCheckpoint("config is not UTF-8".into()))?;
    let config = ModelConfig::from_text(text)
        .map_err(|e| Error::MalformedCheckpoint(format!("config: {e}")))?;
    let mut params = ModelParams::zeros(config)?;
    let blob = &body[config_end..];
    if blob.len() != 8 * params.num_params() {
        return Err(Error::MalformedCheckpoint(format!(
            "{} parameter bytes, config needs {}",
            blob.len(),
            8 * params.num_params()
        )));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for t in params.tensors_mut() {
        for (dst, v) in t.iter_mut().zip(&mut values) {
            *dst = v;
        }
    }
    if !params.is_finite() {
        return Err(Error::MalformedCheckpoint("non-finite parameter".into()));
    }
    Ok(params)
}

pub fn save(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    from_bytes(&fs::read(path)?)
}
