//! Weight checkpoints: a flat little-endian binary container of named
//! arrays plus a JSON manifest.
//!
//! Binary layout (`*.bin`):
//!
//! ```text
//! magic    b"NFCK"
//! version  u32 = 1
//! count    u32
//! repeated count times:
//!   name_len u32, name utf-8 bytes
//!   ndim     u32, dims u64 * ndim
//!   values   f64 * prod(dims)
//! ```
//!
//! The manifest (`*.json`) lists every array's name, shape and byte offset
//! of its values, and carries free-form metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NFCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema: String,
    pub binary: String,
    pub arrays: Vec<ManifestEntry>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Checkpoint { entries, metadata: BTreeMap::new() }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn to_bytes(&self) -> (Vec<u8>, Vec<ManifestEntry>) {
        let mut buf = Vec::new();
        let mut index = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            index.push(ManifestEntry { name: name.clone(), shape: t.shape().to_vec(), offset: buf.len() as u64 });
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        (buf, index)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("array name is not utf-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint::new(entries))
    }

    /// Writes `<stem>.bin` and `<stem>.json`; returns the manifest path.
    pub fn save(&self, stem: &Path) -> Result<PathBuf> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let (bytes, arrays) = self.to_bytes();
        fs::write(&bin, bytes)?;
        let manifest = CheckpointManifest {
            schema: crate::space::SCHEMA_VERSION.to_string(),
            binary: bin.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
            arrays,
            metadata: self.metadata.clone(),
        };
        fs::write(&json, serde_json::to_string_pretty(&manifest)?)?;
        Ok(json)
    }

    /// Loads from either the manifest or the binary path (or their stem).
    pub fn load(path: &Path) -> Result<Self> {
        let json = path.with_extension("json");
        let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&json)?)?;
        if manifest.schema != crate::space::SCHEMA_VERSION {
            return Err(Error::Schema(format!("checkpoint schema `{}`", manifest.schema)));
        }
        let bin = json.with_file_name(&manifest.binary);
        let mut ck = Checkpoint::from_bytes(&fs::read(bin)?)?;
        let names: Vec<&str> = ck.entries.iter().map(|(n, _)| n.as_str()).collect();
        let listed: Vec<&str> = manifest.arrays.iter().map(|e| e.name.as_str()).collect();
        if names != listed {
            return Err(Error::Checkpoint("manifest does not match binary contents".into()));
        }
        ck.metadata = manifest.metadata;
        Ok(ck)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new(vec![
            ("a.w".into(), Tensor::new(vec![2, 3], (0..6).map(|i| i as f64 * 0.5).collect()).unwrap()),
            ("b".into(), Tensor::scalar(-1.25)),
        ]);
        ck.metadata.insert("seed".into(), serde_json::json!(7));
        ck
    }

    #[test]
    fn layout_is_little_endian() {
        let (bytes, index) = sample().to_bytes();
        assert_eq!(&bytes[..4], b"NFCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        let off = index[1].offset as usize;
        assert_eq!(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()), -1.25);
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        let manifest = ck.save(&dir.path().join("weights")).unwrap();
        let back = Checkpoint::load(&manifest).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn corrupt_inputs_error() {
        let (bytes, _) = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
