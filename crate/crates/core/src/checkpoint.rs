//! Binary checkpoint format.
//!
//! ```text
//! "DWSM"                      magic
//! u32 LE                      version
//! u32 LE + UTF-8              backbone config, key=value lines
//! u32 LE                      array count
//! per array:
//!   u32 LE + UTF-8            name
//!   u32 LE                    rank
//!   u32 LE * rank             dims
//!   f32 LE * prod(dims)       values
//! ```
//!
//! Values are always stored as f32; a `Network<f64>` is narrowed on save.

use std::path::Path;

use crate::backbone::{BackboneConfig, Network};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DWSM";
pub const VERSION: u32 = 1;

pub fn encode<S: Scalar>(network: &Network<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &network.config().to_text());
    out.extend_from_slice(&(network.params().len() as u32).to_le_bytes());
    for p in network.params() {
        put_str(&mut out, &p.name);
        out.extend_from_slice(&(p.tensor.dims().len() as u32).to_le_bytes());
        for &d in p.tensor.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<Network<S>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            std::str::from_utf8(MAGIC).expect("ascii")
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let config = BackboneConfig::from_text(&r.string("config block")?)?;
    let count = r.u32("array count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = r.string("array name")?;
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("array {name:?} dims overflow")))?;
        let payload = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint(format!("array {name:?} too large")))?,
            &format!("payload of {name:?}"),
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|c| S::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Checkpoint(format!("array {name:?}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "file has {} bytes but the header describes {}",
            bytes.len(),
            r.pos
        )));
    }
    Network::from_params(config, tensors)
}

pub fn save_checkpoint<S: Scalar>(network: &Network<S>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(network)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Network<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
