//! Binary checkpoint container for named `f64` tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     4 bytes  "RATK"
//! version   u32      1
//! meta_len  u64      length of the metadata blob
//! meta      bytes    UTF-8 text (the experiment config as JSON)
//! count     u32      number of tensors
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, dims u64 × rank
//!   values   f64 × product(dims), IEEE-754 bit patterns
//! sha256    32 bytes over everything above
//! ```
//!
//! Values are stored as raw bit patterns, so a save/load round trip is
//! bit-exact. Any truncation, trailing garbage or flipped byte fails the
//! checksum and is reported as a checkpoint error.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RATK";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Serialises `meta` and every tensor of `params`.
pub fn encode(meta: &str, params: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + params.count() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, value) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(value.ndim() as u32).to_le_bytes());
        for &d in value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in value.data() {
            buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

/// Parses a checkpoint produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<(String, ParamStore)> {
    if bytes.len() < MAGIC.len() + DIGEST_LEN {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch (file corrupted or truncated)".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u64()? as usize;
    let meta = String::from_utf8(r.take(meta_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()));
        let numel = numel.ok_or_else(|| Error::Checkpoint(format!("tensor {name} has an impossible shape {shape:?}")))?;
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_bits(r.u64()?));
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        store.insert(name, t).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if r.remaining() != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok((meta, store))
}

pub fn save(path: &Path, meta: &str, params: &ParamStore) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode(meta, params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(String, ParamStore)> {
    decode(&std::fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Checkpoint("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
