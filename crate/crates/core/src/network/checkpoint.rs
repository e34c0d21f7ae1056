//! Binary checkpoint, little-endian:
//!
//! ```text
//! "BSCK" | u32 version (1) | u64 rng_seed | u32 tensor count
//! per tensor: u32 name length | name (UTF-8) | u32 ndim | u64 dims[ndim] | f32 values[prod(dims)]
//! ```

use std::fs;
use std::path::Path;

use super::{NamedTensor, NetParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BSCK";
const VERSION: u32 = 1;

pub fn save_checkpoint(params: &NetParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&params.rng_seed().to_le_bytes());
    out.extend_from_slice(&(params.tensors().len() as u32).to_le_bytes());
    for t in params.tensors() {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
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
        if self.buf.len() - self.pos < n {
            return Err(Error::CheckpointFormat(format!("truncated at byte {}", self.pos)));
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

/// Parses a checkpoint and checks it against the architecture.
pub fn load_checkpoint(buf: &[u8]) -> Result<NetParams> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointFormat("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointFormat(format!("unsupported version {version}")));
    }
    let seed = r.u64()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::CheckpointFormat("tensor name is not UTF-8".into()))?.to_string();
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(Error::CheckpointFormat(format!("tensor '{name}' has {ndim} dims")));
        }
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::CheckpointFormat("tensor too large".into()))?;
        let bytes = r.take(n.checked_mul(4).ok_or_else(|| Error::CheckpointFormat("tensor too large".into()))?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        tensors.push(NamedTensor { name, shape, data });
    }
    if r.pos != buf.len() {
        return Err(Error::CheckpointFormat(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    NetParams::from_tensors(tensors, seed)
}

pub fn write_checkpoint(params: &NetParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, save_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<NetParams> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_at_f32_precision() {
        let p = NetParams::init(9);
        let bytes = save_checkpoint(&p);
        let q = load_checkpoint(&bytes).unwrap();
        assert_eq!(q.rng_seed(), 9);
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        assert_eq!(save_checkpoint(&q), bytes);
    }

    #[test]
    fn rejects_wrong_architecture_and_garbage() {
        let p = NetParams::init(1);
        let mut tensors = p.tensors().to_vec();
        tensors[0].shape = vec![4, 2, 3, 3, 3];
        tensors[0].data.truncate(4 * 2 * 27);
        let bad = NetParams { tensors, rng_seed: 1, version: 0 };
        assert!(matches!(load_checkpoint(&save_checkpoint(&bad)), Err(Error::CheckpointShape(_))));
        assert!(matches!(load_checkpoint(b"nope"), Err(Error::CheckpointFormat(_))));
        let bytes = save_checkpoint(&p);
        assert!(matches!(load_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::CheckpointFormat(_))));
    }
}
