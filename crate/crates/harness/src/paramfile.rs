//! Versioned binary parameter container.
//!
//! Layout (all integers little-endian):
//! `b"CTXPARAM"`, `u32` version, `u32` tensor count, then per tensor
//! `u32` name length, UTF-8 name, `u32` rank, `u64` dims, `f64` values.

use std::fs;
use std::path::Path;

use ctxtrack_core::{ParamStore, Tensor};

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"CTXPARAM";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
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
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("unexpected end of file")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_inner(bytes: &[u8]) -> std::result::Result<ParamStore, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| "name is not UTF-8")?.to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or("tensor too large")?;
        let raw = r.take(numel.checked_mul(8).ok_or("tensor too large")?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Tensor::new(&dims, data).map_err(|e| format!("{name}: {e}"))?;
        if store.contains(&name) {
            return Err(format!("duplicate tensor {name}"));
        }
        store.insert(name, tensor);
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    Ok(store)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ParamStore> {
    decode_inner(bytes).map_err(|reason| HarnessError::Format { path: path.to_path_buf(), reason })
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode(store)).map_err(HarnessError::io(path))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(HarnessError::io(path))?;
    decode(&bytes, path)
}

/// Checks that `store` has exactly the names and shapes of `reference`.
pub fn check_compatible(store: &ParamStore, reference: &ParamStore) -> Result<()> {
    for (name, t) in reference.iter() {
        match store.get(name) {
            Some(s) if s.shape() == t.shape() => {}
            Some(s) => {
                return Err(HarnessError::config(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    s.shape(),
                    t.shape()
                )))
            }
            None => return Err(HarnessError::config(format!("parameter file lacks {name}"))),
        }
    }
    if store.len() != reference.len() {
        return Err(HarnessError::config("parameter file has tensors the model does not use"));
    }
    Ok(())
}
