//! Binary checkpoints: magic line, JSON header, flat little-endian f64 blob.
//!
//! Layout:
//!
//! ```text
//! <magic>\n
//! u64 LE  header length in bytes
//! header  UTF-8 JSON
//! u64 LE  number of parameters
//! f64 LE  parameters
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn encode<H: Serialize>(magic: &str, header: &H, params: &[f64]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(magic.len() + header.len() + 17 + params.len() * 8);
    out.extend_from_slice(magic.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn take_u64(bytes: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(bytes, 8)?.try_into().expect("8 bytes")))
}

pub fn decode<H: DeserializeOwned>(magic: &str, mut bytes: &[u8]) -> Result<(H, Vec<f64>)> {
    let found = take(&mut bytes, magic.len() + 1)
        .map_err(|_| Error::Checkpoint(format!("missing magic {magic}")))?;
    if &found[..magic.len()] != magic.as_bytes() || found[magic.len()] != b'\n' {
        return Err(Error::Checkpoint(format!(
            "expected magic {magic}, found {:?}",
            String::from_utf8_lossy(found)
        )));
    }
    let header_len = take_u64(&mut bytes)? as usize;
    let header: H = serde_json::from_slice(take(&mut bytes, header_len)?)?;
    let count = take_u64(&mut bytes)? as usize;
    let blob = take(&mut bytes, count.checked_mul(8).ok_or_else(|| Error::Checkpoint("bad count".into()))?)?;
    if !bytes.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len())));
    }
    let params = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, params))
}

/// Reads just the magic line, to dispatch on checkpoint kind.
pub fn peek_magic(bytes: &[u8]) -> Option<&str> {
    let end = bytes.iter().take(32).position(|&b| b == b'\n')?;
    std::str::from_utf8(&bytes[..end]).ok()
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
