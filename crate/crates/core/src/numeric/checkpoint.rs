//! Binary checkpoint format.
//!
//! ```text
//! "REIN1"                                  5-byte magic
//! repeated until EOF:
//!   u32   name length (LE)
//!   [u8]  UTF-8 name
//!   u8    trainable flag (0 or 1)
//!   u8    ndim
//!   u64   dims × ndim (LE)
//!   f64   data, row-major (LE)
//! ```
//!
//! Records are written in the store's lexicographic order, so equal stores
//! serialize to equal bytes.

use std::fs;
use std::path::Path;

use super::store::{Param, ParamStore};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"REIN1";

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + store.numel() * 8 + store.len() * 48);
    out.extend_from_slice(MAGIC);
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(p.trainable as u8);
        out.push(p.shape().len() as u8);
        for &d in p.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated record at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("unknown magic".into()));
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let mut store = ParamStore::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("name is not UTF-8: {e}")))?
            .to_string();
        let trainable = match r.u8()? {
            0 => false,
            1 => true,
            other => {
                return Err(Error::Checkpoint(format!(
                    "{name}: bad trainable flag {other}"
                )))
            }
        };
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: size overflow")))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(name, Param::new(shape, data, trainable)?);
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<u64> {
    let bytes = encode(store);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Format {
            path: path.to_path_buf(),
            msg,
        },
        other => other,
    })
}
