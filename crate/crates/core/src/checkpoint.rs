//! Versioned single-file checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"SEVITCKP" | u32 format version | u64 header length | header (JSON)
//!             | u64 payload length | payload (safetensors)
//! ```
//!
//! The JSON header carries the model kind, its configuration and the SHA-256
//! of the payload, so truncation and bit rot are both reported as corrupt.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SevitError};
use crate::nn::TensorMap;

pub const MAGIC: &[u8; 8] = b"SEVITCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    payload_sha256: String,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> SevitError {
    SevitError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub(crate) fn save<C: Serialize>(path: &Path, kind: &str, config: &C, tensors: &TensorMap) -> Result<()> {
    let payload = safetensors::serialize(tensors.iter(), None)
        .map_err(|e| corrupt(path, format!("serialize: {e}")))?;
    let header = Header {
        kind: kind.to_string(),
        config: serde_json::to_value(config).map_err(|e| corrupt(path, e.to_string()))?,
        payload_sha256: hex_digest(&payload),
    };
    let header = serde_json::to_vec(&header).map_err(|e| corrupt(path, e.to_string()))?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(MAGIC)?;
        file.write_all(&FORMAT_VERSION.to_le_bytes())?;
        file.write_all(&(header.len() as u64).to_le_bytes())?;
        file.write_all(&header)?;
        file.write_all(&(payload.len() as u64).to_le_bytes())?;
        file.write_all(&payload)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) struct Loaded<C> {
    pub config: C,
    pub tensors: HashMap<String, Tensor>,
}

pub(crate) fn load<C: DeserializeOwned>(path: &Path, kind: &str) -> Result<Loaded<C>> {
    let bytes = fs::read(path)?;
    let mut cursor = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if cursor.take(MAGIC.len())? != MAGIC {
        return Err(corrupt(path, "not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(cursor.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(corrupt(
            path,
            format!("unsupported format version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let header_len = cursor.u64()?;
    let header: Header = serde_json::from_slice(cursor.take(header_len)?)
        .map_err(|e| corrupt(path, format!("header: {e}")))?;
    let payload_len = cursor.u64()?;
    let payload = cursor.take(payload_len)?;
    if cursor.pos != bytes.len() {
        return Err(corrupt(path, "trailing bytes after payload"));
    }
    if header.kind != kind {
        return Err(corrupt(path, format!("holds a {} checkpoint, expected {kind}", header.kind)));
    }
    if hex_digest(payload) != header.payload_sha256 {
        return Err(corrupt(path, "payload checksum mismatch"));
    }
    let config = serde_json::from_value(header.config).map_err(|e| corrupt(path, format!("config: {e}")))?;
    let tensors = candle_core::safetensors::load_buffer(payload, &Device::Cpu)
        .map_err(|e| corrupt(path, format!("payload: {e}")))?;
    Ok(Loaded { config, tensors })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: impl TryInto<usize>) -> Result<&'a [u8]> {
        let n = n.try_into().map_err(|_| corrupt(self.path, "length overflow"))?;
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| corrupt(self.path, "file is truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8usize)?.try_into().unwrap()))
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
