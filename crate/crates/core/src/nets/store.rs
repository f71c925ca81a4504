//! Named-tensor store: the on-disk format for checkpoints and for the
//! perceptual network weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"EBTS"
//! version u32 = 1
//! count   u32
//! count × { name_len u32, name utf8, dtype u8 (0 = f32), ndim u32,
//!           dims u64 × ndim, values f32 × prod(dims) }
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::params::{Param, ParamSet};

const MAGIC: &[u8; 4] = b"EBTS";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode(tensors: &[&Param<f32>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Model("truncated tensor store".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(4)?.read_exact(&mut b).expect("length checked");
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.take(8)?.read_exact(&mut b).expect("length checked");
        Ok(u64::from_le_bytes(b))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Param<f32>>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Model("not a tensor store (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Model(format!("unsupported tensor store version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Model("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = c.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Model(format!("tensor {name}: unsupported dtype code {dtype}")));
        }
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = c.take(numel.checked_mul(4).ok_or_else(|| Error::Model("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if out.iter().any(|p: &Param<f32>| p.name == name) {
            return Err(Error::Model(format!("duplicate tensor name {name}")));
        }
        out.push(Param { name, shape, data });
    }
    if c.pos != bytes.len() {
        return Err(Error::Model("trailing bytes after tensor store".into()));
    }
    Ok(out)
}

pub fn write(path: &Path, tensors: &[&Param<f32>]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<Param<f32>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Extracts the tensors whose names start with `prefix/`, stripping it.
pub fn take_prefixed(tensors: &[Param<f32>], prefix: &str) -> ParamSet<f32> {
    let p = format!("{prefix}/");
    ParamSet::from_params(
        tensors
            .iter()
            .filter_map(|t| {
                t.name.strip_prefix(&p).map(|n| Param {
                    name: n.to_string(),
                    shape: t.shape.clone(),
                    data: t.data.clone(),
                })
            })
            .collect(),
    )
}

/// Copies of `set`'s tensors with names prefixed by `prefix/`.
pub fn prefixed(set: &ParamSet<f32>, prefix: &str) -> Vec<Param<f32>> {
    set.params()
        .iter()
        .map(|p| Param {
            name: format!("{prefix}/{}", p.name),
            shape: p.shape.clone(),
            data: p.data.clone(),
        })
        .collect()
}
