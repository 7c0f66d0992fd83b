// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoint and token-stream file formats.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "ASCM" | u32 version = 1 | u64 json_len | json(ModelConfig)
//!        | f32 tensors in canonical order | u32 CRC32(tensor bytes)
//! ```
//!
//! Token stream layout: `"ASCT" | u32 version = 1 | u64 n | n x u32`.

use std::fs;
use std::path::Path;

use crate::error::{AscError, Result};
use crate::model::{ModelConfig, TransformerWeights};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ASCM";
pub const TOKENS_MAGIC: &[u8; 4] = b"ASCT";
pub const FORMAT_VERSION: u32 = 1;

/// Serializes weights to checkpoint bytes. Values are narrowed to f32.
pub fn encode_checkpoint(cfg: &ModelConfig, w: &TransformerWeights) -> Result<Vec<u8>> {
    w.validate(cfg)?;
    let json = serde_json::to_vec(cfg)?;
    let n_params = w.n_params();
    let mut out = Vec::with_capacity(16 + json.len() + 4 * n_params + 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let payload_start = out.len();
    for t in w.tensors() {
        for v in t {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[payload_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| AscError::Load(format!("truncated file while reading {what}")))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

fn read_u32(bytes: &[u8], at: &mut usize, what: &str) -> Result<u32> {
    let s = take(bytes, at, 4, what)?;
    Ok(u32::from_le_bytes(s.try_into().expect("4 bytes")))
}

fn read_u64(bytes: &[u8], at: &mut usize, what: &str) -> Result<u64> {
    let s = take(bytes, at, 8, what)?;
    Ok(u64::from_le_bytes(s.try_into().expect("8 bytes")))
}

/// Parses checkpoint bytes, verifying magic, version and CRC. Values widen to f64.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, TransformerWeights)> {
    let mut at = 0;
    if take(bytes, &mut at, 4, "magic")? != CHECKPOINT_MAGIC {
        return Err(AscError::Load("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(bytes, &mut at, "version")?;
    if version != FORMAT_VERSION {
        return Err(AscError::Load(format!("unsupported checkpoint version {version}")));
    }
    let json_len = read_u64(bytes, &mut at, "config length")? as usize;
    let json = take(bytes, &mut at, json_len, "config")?;
    let cfg: ModelConfig = serde_json::from_slice(json)
        .map_err(|e| AscError::Load(format!("checkpoint config: {e}")))?;
    cfg.validate()?;

    let mut w = TransformerWeights::zeros(&cfg);
    let n_params = w.n_params();
    let payload = take(bytes, &mut at, 4 * n_params, "tensors")?;
    let stored_crc = read_u32(bytes, &mut at, "crc")?;
    if at != bytes.len() {
        return Err(AscError::Load(format!("{} trailing bytes after checkpoint", bytes.len() - at)));
    }
    let crc = crc32fast::hash(payload);
    if crc != stored_crc {
        return Err(AscError::Load(format!(
            "CRC mismatch: stored {stored_crc:08x}, computed {crc:08x}"
        )));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    for t in w.tensors_mut() {
        for (slot, v) in t.iter_mut().zip(values.by_ref()) {
            *slot = v;
        }
    }
    w.validate(&cfg)?;
    Ok((cfg, w))
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, w: &TransformerWeights) -> Result<()> {
    fs::write(path, encode_checkpoint(cfg, w)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, TransformerWeights)> {
    let bytes = fs::read(path).map_err(|e| AscError::Load(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

/// Rounds every weight through f32, giving exactly what a checkpoint
/// round-trip would load.
pub fn narrow_to_f32(w: &mut TransformerWeights) {
    for t in w.tensors_mut() {
        t.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

pub fn encode_tokens(tokens: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * tokens.len());
    out.extend_from_slice(TOKENS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tokens.len() as u64).to_le_bytes());
    for t in tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

pub fn decode_tokens(bytes: &[u8]) -> Result<Vec<u32>> {
    let mut at = 0;
    if take(bytes, &mut at, 4, "magic")? != TOKENS_MAGIC {
        return Err(AscError::Load("not a token file (bad magic)".into()));
    }
    let version = read_u32(bytes, &mut at, "version")?;
    if version != FORMAT_VERSION {
        return Err(AscError::Load(format!("unsupported token file version {version}")));
    }
    let n = read_u64(bytes, &mut at, "length")? as usize;
    let body = take(bytes, &mut at, n.checked_mul(4).ok_or_else(|| AscError::Load("length overflow".into()))?, "tokens")?;
    if at != bytes.len() {
        return Err(AscError::Load("trailing bytes after token stream".into()));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub fn save_tokens(path: &Path, tokens: &[u32]) -> Result<()> {
    fs::write(path, encode_tokens(tokens))?;
    Ok(())
}

pub fn load_tokens(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path).map_err(|e| AscError::Load(format!("{}: {e}", path.display())))?;
    decode_tokens(&bytes)
}
