//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"PMCK"
//! version u32 (currently 1)
//! count   u32
//! then per tensor, in ascending name order:
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, extents u64 * rank
//!   dtype    u8 (0 = f32, 1 = f64)
//!   payload  raw little-endian values
//! ```
//!
//! The writer iterates the store's name-ordered map, so save -> load -> save
//! reproduces the file byte for byte.

use std::path::Path;

use super::{ParamStore, Scalar};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PMCK";
pub const VERSION: u32 = 1;

pub fn write_checkpoint_bytes<E: Scalar>(params: &ParamStore<E>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &e in &p.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        out.push(E::DTYPE_TAG);
        for &v in &p.data {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn write_checkpoint<E: Scalar>(params: &ParamStore<E>, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint_bytes(params)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::parse(self.path, "unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint_bytes<E: Scalar>(buf: &[u8], origin: &Path) -> Result<ParamStore<E>> {
    let mut r = Reader {
        buf,
        pos: 0,
        path: origin,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::parse(origin, "bad magic, not a PMCK checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::parse(
            origin,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::parse(origin, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let tag = r.take(1)?[0];
        if tag != E::DTYPE_TAG {
            return Err(Error::parse(
                origin,
                format!(
                    "tensor {name} has dtype tag {tag}, expected {}",
                    E::DTYPE_TAG
                ),
            ));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * E::BYTES)?;
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(E::read_le(&raw[i * E::BYTES..]));
        }
        params.insert(name, &shape, data);
    }
    if r.pos != buf.len() {
        return Err(Error::parse(origin, "trailing bytes after last tensor"));
    }
    Ok(params)
}

pub fn read_checkpoint<E: Scalar>(path: &Path) -> Result<ParamStore<E>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint_bytes(&buf, path)
}
