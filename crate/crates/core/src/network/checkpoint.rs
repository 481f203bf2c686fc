//! Binary checkpoint format, all integers and floats little-endian:
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 4            | magic `CHRM`                              |
//! | 4 (u32)      | format version, currently 1               |
//! | 4 (u32)      | length `L` of the descriptor JSON         |
//! | L            | architecture descriptor, UTF-8 JSON       |
//! | 8 (u64)      | number `V` of parameter values            |
//! | 8·V (f64)    | parameter values in descriptor order      |
//! | 4 (u32)      | CRC-32 (IEEE) of every preceding byte     |

use std::path::Path;

use super::{ArchDescriptor, ModelParams, NetworkError};

pub const MAGIC: &[u8; 4] = b"CHRM";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Crc { stored: u32, computed: u32 },
    #[error("checkpoint too short to hold a checksum ({0} bytes)")]
    Truncated(usize),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint architecture differs from the expected one")]
    ArchMismatch {
        expected: Box<ArchDescriptor>,
        found: Box<ArchDescriptor>,
    },
    #[error(transparent)]
    Params(#[from] NetworkError),
}

/// Serialize parameters to the checkpoint byte layout.
pub fn write_checkpoint(params: &ModelParams) -> Vec<u8> {
    let json = serde_json::to_vec(params.descriptor()).expect("descriptor serializes");
    let values = params.flat_values();
    let mut out = Vec::with_capacity(24 + json.len() + 8 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Malformed(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parse a checkpoint. The checksum is verified before anything else.
pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelParams, CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated(bytes.len()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }

    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let len = r.u32()? as usize;
    let descriptor: ArchDescriptor = serde_json::from_slice(r.take(len)?)
        .map_err(|e| CheckpointError::Malformed(format!("descriptor: {e}")))?;
    let count = usize::try_from(r.u64()?).map_err(|_| CheckpointError::Malformed("value count".into()))?;
    let raw = r.take(count.checked_mul(8).ok_or_else(|| CheckpointError::Malformed("value count".into()))?)?;
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes before the checksum",
            body.len() - r.pos
        )));
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(ModelParams::from_values(descriptor, &values)?)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<(), CheckpointError> {
    std::fs::write(path, write_checkpoint(params))?;
    Ok(())
}

/// Load a checkpoint, optionally requiring a specific architecture.
pub fn load_checkpoint(path: &Path, expected: Option<&ArchDescriptor>) -> Result<ModelParams, CheckpointError> {
    let params = read_checkpoint(&std::fs::read(path)?)?;
    if let Some(expected) = expected {
        if params.descriptor() != expected {
            return Err(CheckpointError::ArchMismatch {
                expected: Box::new(expected.clone()),
                found: Box::new(params.descriptor().clone()),
            });
        }
    }
    Ok(params)
}
