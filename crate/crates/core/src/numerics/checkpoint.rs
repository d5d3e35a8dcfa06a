//! Little-endian parameter container.
//!
//! ```text
//! magic    8 bytes  "FLAPCKPT"
//! version  u32      1
//! count    u32      number of parameters
//! repeated count times, in ascending name order:
//!   name_len u32, name (UTF-8), rank u32, extents u64 × rank, payload f64 × numel
//! ```

use std::fs;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{FlapError, Result};

pub const MAGIC: &[u8; 8] = b"FLAPCKPT";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.scalar_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| FlapError::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(FlapError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FlapError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| FlapError::Checkpoint(format!("parameter name: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| FlapError::Checkpoint(format!("parameter {name}: {e}")))?;
        params.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(FlapError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ParamStore) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| FlapError::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| FlapError::io(path, e))?;
    decode(&bytes)
}
