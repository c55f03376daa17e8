//! Binary checkpoint container.
//!
//! ```text
//! magic     8 bytes  "GHNQCKPT"
//! version   u32 LE
//! hdr_len   u64 LE
//! header    hdr_len bytes of JSON (object; "hypernet" holds the config)
//! count     u64 LE
//! count x { name_len u32 LE, name utf-8, ndim u32 LE, dims u64 LE x ndim,
//!           data f64 LE x prod(dims) }
//! digest    32 bytes SHA-256 of everything above
//! ```

use std::collections::BTreeMap;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{Hypernet, HypernetConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GHNQCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const HYPERNET_PREFIX: &str = "hypernet.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Value,
    pub tensors: BTreeMap<String, Tensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
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

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

impl Checkpoint {
    pub fn new(header: Value) -> Self {
        Checkpoint {
            header,
            tensors: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let hdr = serde_json::to_vec(&self.header).expect("json header");
        out.extend_from_slice(&(hdr.len() as u64).to_le_bytes());
        out.extend_from_slice(&hdr);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a ghnq checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        if bytes.len() < 12 + 32 {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("integrity check failed (digest mismatch)".into()));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let hdr_len = r.len()?;
        let header: Value = serde_json::from_slice(r.take(hdr_len)?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = r.len()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' too large")))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("tensor '{name}': {e}")))?;
            tensors.insert(name, t);
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Checkpoint { header, tensors })
    }
}

impl Hypernet {
    /// A checkpoint holding only this hypernet.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(json!({ "hypernet": self.config() }));
        for (n, t) in self.names().iter().zip(self.params()) {
            c.tensors.insert(format!("{HYPERNET_PREFIX}{n}"), t.clone());
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let cfg: HypernetConfig = serde_json::from_value(
            c.header
                .get("hypernet")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("header lacks 'hypernet' config".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("hypernet config: {e}")))?;
        let named: BTreeMap<String, Tensor> = c
            .tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(HYPERNET_PREFIX).map(|n| (n.to_string(), t.clone())))
            .collect();
        Hypernet::from_tensors(cfg, &named)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypernet::tests::tiny_cfg;

    #[test]
    fn roundtrip() {
        let h = Hypernet::new(tiny_cfg()).unwrap();
        let mut c = h.to_checkpoint();
        c.header["note"] = json!("x");
        c.tensors.insert("extra".into(), Tensor::full(&[2, 2], -0.5));
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(Hypernet::from_checkpoint(&back).unwrap(), h);
    }

    #[test]
    fn rejects_version_corruption_and_truncation() {
        let h = Hypernet::new(tiny_cfg()).unwrap();
        let bytes = h.to_checkpoint().to_bytes();

        let mut v2 = bytes.clone();
        v2[8] = 2;
        let e = Checkpoint::from_bytes(&v2).unwrap_err().to_string();
        assert!(e.contains("version 2"), "{e}");

        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 1;
        let e = Checkpoint::from_bytes(&flipped).unwrap_err().to_string();
        assert!(e.contains("integrity"), "{e}");

        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
    }
}
