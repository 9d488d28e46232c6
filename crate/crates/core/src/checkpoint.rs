//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "NLSTM001"              8-byte magic
//! precision               u8, 4 (f32) or 8 (f64)
//! repeated until EOF:
//!   name_len  u32
//!   name      UTF-8 bytes
//!   rank      u32
//!   dims      rank x u32
//!   payload   product(dims) floats of the header precision
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NLSTM001";

pub fn encode<T: Scalar>(records: &[(String, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(T::BYTES);
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Precision byte of an encoded checkpoint (4 or 8).
pub fn precision(bytes: &[u8]) -> Result<u8> {
    if bytes.len() < 9 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing NLSTM001 magic".into()));
    }
    match bytes[8] {
        p @ (4 | 8) => Ok(p),
        p => Err(Error::Checkpoint(format!("unknown precision flag {p}"))),
    }
}

/// Decodes records, converting elements to `T` if the stored precision differs.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let width = precision(bytes)? as usize;
    let mut r = Reader { bytes, pos: 9 };
    let mut records = Vec::new();
    while !r.done() {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * width, "payload")?;
        let data: Vec<T> = payload
            .chunks_exact(width)
            .map(|c| if width == 4 { T::of(f32::read_le(c) as f64) } else { T::of(f64::read_le(c)) })
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("record `{name}`: {e}")))?;
        records.push((name, tensor));
    }
    Ok(records)
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
pub fn save<T: Scalar>(path: &Path, records: &[(String, &Tensor<T>)]) -> Result<()> {
    write_atomic(path, &encode(records))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    decode(&fs::read(path)?)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
