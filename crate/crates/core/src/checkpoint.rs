//! Binary checkpoint format.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic   b"GPAV"
//! version u32 (currently 1)
//! count   u32
//! then per tensor:
//!   name_len u16, name UTF-8, rank u8, extents u64[rank], values f64[prod]
//! ```
//!
//! Round-trips are bit-exact. Parse errors report the byte offset where the
//! problem was detected. Writes go through a temp file plus rename so a
//! checkpoint on disk is never half-written.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GPAV";
pub const VERSION: u32 = 1;

/// Serialize named tensors in the given order.
pub fn encode(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::contract("checkpoint::encode", format!("name too long: {name}")));
        }
        out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(bytes);
        let shape = tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::contract("checkpoint::encode", "rank exceeds u8"));
        }
        out.push(shape.len() as u8);
        for &e in shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in tensor.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    data: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.data.len() {
            return Err(Error::Parse {
                offset: self.at,
                message: format!("truncated while reading {what} ({n} bytes needed, {} left)", self.data.len() - self.at),
            });
        }
        let s = &self.data[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parse a checkpoint buffer into named tensors (in file order).
pub fn decode(data: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { data, at: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let count = cur.u32("tensor count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16("name length")? as usize;
        let name_at = cur.at;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|e| Error::Parse {
                offset: name_at,
                message: format!("name is not UTF-8: {e}"),
            })?
            .to_string();
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("extent")? as usize);
        }
        let count: usize = shape.iter().product();
        let values_at = cur.at;
        let raw = cur.take(count * 8, "values")?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, values).map_err(|e| Error::Parse {
            offset: values_at,
            message: format!("invalid tensor `{name}`: {e}"),
        })?;
        entries.push((name, tensor));
    }
    if cur.at != data.len() {
        return Err(Error::Parse {
            offset: cur.at,
            message: format!("{} trailing bytes", data.len() - cur.at),
        });
    }
    Ok(entries)
}

/// Atomic write: temp file in the same directory, then rename.
pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode(entries)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let data = fs::read(path)?;
    decode(&data)
}
