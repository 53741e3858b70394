//! Named-tensor checkpoint files.
//!
//! Layout: an 8-byte little-endian header length `H`, then `H` bytes of JSON
//! header, then the tensors' values as one flat little-endian `f64` stream.
//! Header offsets are byte offsets into that stream.
//!
//! ```json
//! {"format":"depthrnn-tensors","version":1,"kind":"dgdpu",
//!  "tensors":[{"name":"w_a","shape":[32,32],"offset":0,"bytes":8192}, ...]}
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numerics::{NumericsError, Tensor};

pub const FORMAT: &str = "depthrnn-tensors";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    /// What the tensors parameterize, e.g. `backbone`, `dgdpu`, `gru`.
    pub kind: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(kind: &str, tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        let bytes = (t.len() * 8) as u64;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            bytes,
        });
        offset += bytes;
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        kind: kind.into(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(Header, Vec<(String, Tensor)>), CheckpointError> {
    if bytes.len() < 8 {
        return Err(CheckpointError::Malformed("missing header length".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body_start = 8usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CheckpointError::Malformed("header length exceeds file".into()))?;
    let header: Header = serde_json::from_slice(&bytes[8..body_start])?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(CheckpointError::Malformed(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let body = &bytes[body_start..];
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let (start, len) = (e.offset as usize, e.bytes as usize);
        if len != n * 8 || start.checked_add(len).is_none_or(|end| end > body.len()) {
            return Err(CheckpointError::Malformed(format!("tensor {} out of bounds", e.name)));
        }
        let data = body[start..start + len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((e.name.clone(), Tensor::new(&e.shape, data)?));
    }
    Ok((header, out))
}

pub fn write(path: &Path, kind: &str, tensors: &[(String, &Tensor)]) -> Result<(), CheckpointError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(kind, tensors))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<(Header, Vec<(String, Tensor)>), CheckpointError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
