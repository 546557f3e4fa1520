//! Model checkpoints.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic       8 bytes  "MDHGRCKP"
//! version     u32      1
//! config_len  u32
//! config      JSON     ModelConfig
//! tag_len     u32
//! tag         UTF-8    free-form, e.g. the experiment config hash
//! n_tensors   u32
//! per tensor:
//!   name_len u16 | name UTF-8 | ndim u8 | dims u32 × ndim | values f64 × ∏dims
//! sha256      32 bytes digest of everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

const MAGIC: &[u8; 8] = b"MDHGRCKP";
const VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub tag: String,
}

pub fn encode_checkpoint(params: &ModelParams, tag: &str) -> Vec<u8> {
    let config = serde_json::to_vec(&params.config).expect("config serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&(tag.len() as u32).to_le_bytes());
    buf.extend_from_slice(tag.as_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.named() {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad("checkpoint truncated"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 32 {
        return Err(bad("checkpoint truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let mut c = Cursor { buf: body, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let config_len = c.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(c.take(config_len)?)
        .map_err(|e| bad(format!("config header: {e}")))?;
    let tag_len = c.u32()? as usize;
    let tag = std::str::from_utf8(c.take(tag_len)?)
        .map_err(|_| bad("tag is not UTF-8"))?
        .to_string();
    let n = c.u32()? as usize;
    let mut named = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let name_len = u16::from_le_bytes(c.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_string();
        let ndim = c.take(1)?[0] as usize;
        let shape = (0..ndim)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = c
            .take(len.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
        named.push((name, tensor));
    }
    if c.pos != body.len() {
        return Err(bad("trailing bytes after tensors"));
    }
    Ok(Checkpoint {
        params: ModelParams::from_named(config, named)?,
        tag,
    })
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, tag: &str) -> Result<()> {
    fs::write(path, encode_checkpoint(params, tag)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
