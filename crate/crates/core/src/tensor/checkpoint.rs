//! Binary parameter checkpoints.
//!
//! Layout: `"FRID"`, version byte `0x01`, then one record per parameter until
//! end of input:
//!
//! | field        | encoding                    |
//! |--------------|-----------------------------|
//! | name length  | `u32` little-endian         |
//! | name         | UTF-8 bytes                 |
//! | rank         | `u32` little-endian         |
//! | extents      | `rank` x `u64` little-endian|
//! | values       | `f32` little-endian, row-major |

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FRID";
pub const CHECKPOINT_VERSION: u8 = 0x01;

fn io_err(e: std::io::Error) -> Error {
    Error::io("<checkpoint stream>", e)
}

pub fn write_checkpoint(mut w: impl Write, store: &ParamStore) -> Result<()> {
    let mut buf = Vec::with_capacity(5 + store.num_values() * 4);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.push(CHECKPOINT_VERSION);
    for (_, p) in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &e in p.value.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(io_err)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                "checkpoint",
                format!("truncated while reading {what} at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io_err)?;
    if bytes.len() < 5 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "missing FRID magic"));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported version {:#04x}", bytes[4]),
        ));
    }
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 5,
    };
    let mut store = ParamStore::new();
    while cur.pos < bytes.len() {
        let len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::format("checkpoint", "parameter name is not UTF-8"))?
            .to_owned();
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 4, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(&shape, data)
            .map_err(|e| Error::format("checkpoint", format!("parameter `{name}`: {e}")))?;
        store
            .add(name, t)
            .map_err(|e| Error::format("checkpoint", e.to_string()))?;
    }
    Ok(store)
}
