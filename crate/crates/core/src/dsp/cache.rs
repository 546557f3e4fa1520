//! Binary window cache.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "MDHGRWIN"
//! version    u32       1
//! header_len u32
//! header     JSON      {"dtype":"f32","window_shape":[T,4,8,8],"count":N,
//!                       "labels":[...11 names...],"config_hash":"..."}
//! N windows, each:
//!   subject u32 | gesture u8 | day u8 | repetition u8 | reserved u8 | index u32
//!   T·256 f32 samples, time-major, grid-major channel order
//! sha256     32 bytes  digest of everything above
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{WindowSet, WindowTensor};
use crate::dataset::{Day, Provenance, CHANNELS, GESTURES, GRIDS, GRID_COLS, GRID_ROWS};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MDHGRWIN";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub dtype: String,
    pub window_shape: [usize; 4],
    pub count: usize,
    pub labels: Vec<String>,
    pub config_hash: String,
}

pub fn encode(set: &WindowSet, config_hash: &str) -> Vec<u8> {
    let t = set.window_samples();
    let header = CacheHeader {
        dtype: "f32".into(),
        window_shape: [t, GRIDS, GRID_ROWS, GRID_COLS],
        count: set.len(),
        labels: GESTURES.iter().map(|s| s.to_string()).collect(),
        config_hash: config_hash.to_string(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(16 + header.len() + set.len() * (12 + t * CHANNELS * 4) + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for i in 0..set.len() {
        let p = set.provenance(i);
        buf.extend_from_slice(&p.subject.to_le_bytes());
        buf.extend_from_slice(&[p.gesture, p.day.number(), p.repetition, 0]);
        buf.extend_from_slice(&set.window_index(i).to_le_bytes());
        for v in set.samples(i) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(Error::Data("window cache truncated".into()));
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(CacheHeader, WindowSet)> {
    if bytes.len() < MAGIC.len() + 8 + 32 {
        return Err(Error::Data("window cache truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Data("window cache checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Data("not a window cache (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported window cache version {version}")));
    }
    let header_len = r.u32()? as usize;
    let header: CacheHeader = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Data(format!("window cache header: {e}")))?;
    if header.dtype != "f32" || header.window_shape[1..] != [GRIDS, GRID_ROWS, GRID_COLS] {
        return Err(Error::Data(format!(
            "unsupported window cache layout {:?} {:?}",
            header.dtype, header.window_shape
        )));
    }
    let t = header.window_shape[0];
    let mut set = WindowSet::empty(t);
    for _ in 0..header.count {
        let subject = r.u32()?;
        let meta = r.take(4)?;
        let day = Day::from_number(meta[1])
            .ok_or_else(|| Error::Data(format!("bad day {} in window cache", meta[1])))?;
        let index = r.u32()?;
        let data = r
            .take(t * CHANNELS * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let provenance = Provenance {
            subject,
            gesture: meta[0],
            day,
            repetition: meta[2],
        };
        set.push_window(WindowTensor::from_flat(t, data, provenance, index)?)?;
    }
    if r.pos != body.len() {
        return Err(Error::Data("trailing bytes in window cache".into()));
    }
    Ok((header, set))
}

pub fn write(path: &Path, set: &WindowSet, config_hash: &str) -> Result<()> {
    fs::write(path, encode(set, config_hash)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(CacheHeader, WindowSet)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
