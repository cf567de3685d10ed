//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "CLOVERCK"
//! version      u32
//! digest       u32 length + UTF-8 (hex SHA-256 of the model config)
//! metadata     u32 length + UTF-8 JSON
//! count        u32
//! entries      count × { u32 name length, name, u8 dtype (0 = f32, 1 = f64),
//!                        u32 rank, rank × u64 dims, IEEE-754 payload }
//! ```
//!
//! Entries are written in the order given, so save → load → save is byte-identical.

use std::io::Write;
use std::path::Path;

use crate::error::{CloverError, Result};
use crate::substrate::{DType, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"CLOVERCK";
pub const FORMAT_VERSION: u32 = 1;

/// A stored tensor in its original precision.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn from_real<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::Float32 => StoredTensor::F32(t.cast()),
            DType::Float64 => StoredTensor::F64(t.cast()),
        }
    }

    /// Converts to `T`; exact when the stored precision matches.
    pub fn to_real<T: Real>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::Float32,
            StoredTensor::F64(_) => DType::Float64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointFile {
    pub format_version: u32,
    pub config_digest: String,
    pub metadata: String,
    pub entries: Vec<(String, StoredTensor)>,
}

impl CheckpointFile {
    pub fn new(config_digest: String, metadata: String) -> Self {
        CheckpointFile {
            format_version: FORMAT_VERSION,
            config_digest,
            metadata,
            entries: Vec::new(),
        }
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.push((name.into(), StoredTensor::from_real(t)));
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a StoredTensor)> {
        self.entries
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|rest| (rest, t)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        write_str(&mut out, &self.config_digest);
        write_str(&mut out, &self.metadata);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            write_str(&mut out, name);
            out.push(t.dtype().tag());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CloverError::Checkpoint("bad magic".into()));
        }
        let format_version = r.u32()?;
        if format_version != FORMAT_VERSION {
            return Err(CloverError::Checkpoint(format!(
                "unsupported format version {format_version}"
            )));
        }
        let config_digest = r.string()?;
        let metadata = r.string()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let dtype = DType::from_tag(r.u8()?)
                .ok_or_else(|| CloverError::Checkpoint(format!("`{name}`: unknown dtype tag")))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = r
                .take(n.checked_mul(dtype.size_of()).ok_or_else(|| {
                    CloverError::Checkpoint(format!("`{name}`: size overflow"))
                })?)?;
            let t = match dtype {
                DType::Float32 => StoredTensor::F32(Tensor::new(
                    shape,
                    payload.chunks_exact(4).map(f32::read_le).collect(),
                )?),
                DType::Float64 => StoredTensor::F64(Tensor::new(
                    shape,
                    payload.chunks_exact(8).map(f64::read_le).collect(),
                )?),
            };
            entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CloverError::Checkpoint("trailing bytes".into()));
        }
        Ok(CheckpointFile {
            format_version,
            config_digest,
            metadata,
            entries,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CloverError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Atomic file replacement: write `path.tmp`, fsync, rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| CloverError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CloverError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CloverError::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| CloverError::io(path, e))
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CloverError::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CloverError::Checkpoint("invalid UTF-8".into()))
    }
}
