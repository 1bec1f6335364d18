//! `FCKP` parameter container.
//!
//! Layout: magic `FCKP`, version u32, then per parameter until EOF:
//! name length u32, UTF-8 name, rank u32, rank × u64 extents, f64 payload.
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"FCKP";
pub const VERSION: u32 = 1;

/// Longest accepted parameter name; guards against absurd length fields.
const MAX_NAME_LEN: usize = 4096;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + store.num_values() * 8 + store.len() * 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in p.value.data() {
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
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::format(
                "checkpoint",
                format!("truncated {what} at byte {}", self.pos),
            ));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Parses a checkpoint into a fresh store holding the same names, shapes and values.
pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported version {version}"),
        ));
    }
    let mut store = ParamStore::new();
    while !r.done() {
        let len = r.u32("name length")? as usize;
        if len == 0 || len > MAX_NAME_LEN {
            return Err(Error::format(
                "checkpoint",
                format!("bad name length {len}"),
            ));
        }
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format("checkpoint", "name is not UTF-8"))?
            .to_owned();
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(
                "checkpoint",
                format!("`{name}`: bad rank {rank}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let e = usize::try_from(r.u64("extent")?).ok().filter(|&e| e >= 1);
            let e =
                e.ok_or_else(|| Error::format("checkpoint", format!("`{name}`: bad extent")))?;
            count = count
                .checked_mul(e)
                .filter(|&c| c.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| {
                    Error::format("checkpoint", format!("`{name}`: payload exceeds file"))
                })?;
            shape.push(e);
        }
        let payload = r.take(count * 8, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store
            .add(name, Tensor::new(shape, data)?)
            .map_err(|e| Error::format("checkpoint", e.to_string()))?;
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode(store)).map_err(Error::at(path))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    decode(&fs::read(path).map_err(Error::at(path))?)
}

/// Loads a checkpoint into `store`, which must hold identically named and shaped parameters.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    store.load_values(&load(path)?)
}
