//! Binary parameter checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! magic   8 bytes  "CONNACKP"
//! version u32      = 1
//! seed    u64
//! hash    32 bytes SHA-256 of the canonical run config
//! count   u32
//! count × { name_len u32, name utf-8, ndim u32, dims u64 × ndim, values f64 × Π dims }
//! ```

use std::fs;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{ConnaError, Result};

pub const MAGIC: &[u8; 8] = b"CONNACKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: [u8; 32],
}

pub fn encode(params: &ParamStore, meta: &CheckpointMeta) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + params.num_scalars() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&meta.seed.to_le_bytes());
    buf.extend_from_slice(&meta.config_hash);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ConnaError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, CheckpointMeta)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(ConnaError::Checkpoint("bad magic header".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ConnaError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let seed = r.u64()?;
    let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| ConnaError::Checkpoint(format!("parameter name: {e}")))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| ConnaError::Checkpoint("size overflow".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(ConnaError::Checkpoint(
            "trailing bytes after last parameter".into(),
        ));
    }
    Ok((params, CheckpointMeta { seed, config_hash }))
}

pub fn save(path: &Path, params: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    fs::write(path, encode(params, meta)).map_err(|e| ConnaError::io(path, e))
}

pub fn load(path: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| ConnaError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..40), seed in any::<u64>()) {
            let mut p = ParamStore::new();
            p.insert("a.w", Tensor::new(vec![values.len()], values.clone()).unwrap()).unwrap();
            p.insert("b", Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap()).unwrap();
            let meta = CheckpointMeta { seed, config_hash: [7; 32] };
            let (q, m) = decode(&encode(&p, &meta)).unwrap();
            prop_assert_eq!(q, p);
            prop_assert_eq!(m, meta);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut p = ParamStore::new();
        p.insert_filled("w", 2, 2, 1.0).unwrap();
        let bytes = encode(
            &p,
            &CheckpointMeta {
                seed: 1,
                config_hash: [0; 32],
            },
        );
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(ConnaError::Checkpoint(_))));
    }
}
