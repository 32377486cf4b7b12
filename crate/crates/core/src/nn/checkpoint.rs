//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "TSCK"
//! version      u32      (currently 1)
//! fingerprint  u32 byte length, then UTF-8 bytes
//! records      u32 count, then per record:
//!     name     u32 byte length, then UTF-8 bytes
//!     ndim     u32
//!     dims     ndim × u64
//!     values   prod(dims) × f64 (IEEE-754 bits)
//! ```
//!
//! Records follow parameter registration order. Decoding then re-encoding
//! reproduces the input bytes exactly.

use std::fs;
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, fingerprint: &str) -> Self {
        let records = store
            .iter()
            .map(|(_, name, t)| Record {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.values().to_vec(),
            })
            .collect();
        Checkpoint {
            fingerprint: fingerprint.to_string(),
            records,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.fingerprint);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            put_str(&mut out, &r.name);
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &r.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let fingerprint = r.string()?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let values = (0..numel)
                .map(|_| r.u64().map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            records.push(Record {
                name,
                shape,
                values,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            fingerprint,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Copies record values into `store`, which must have the same names,
    /// order and shapes, and a matching configuration fingerprint.
    pub fn restore_into(&self, store: &mut ParamStore, fingerprint: &str) -> Result<()> {
        if self.fingerprint != fingerprint {
            return Err(Error::Checkpoint(format!(
                "config fingerprint mismatch: checkpoint {} vs model {}",
                self.fingerprint, fingerprint
            )));
        }
        if self.records.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "{} records for a model with {} parameters",
                self.records.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, rec) in ids.into_iter().zip(&self.records) {
            if store.name(id) != rec.name || store.get(id).shape() != rec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "record `{}` {:?} does not match parameter `{}` {:?}",
                    rec.name,
                    rec.shape,
                    store.name(id),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = Tensor::new(rec.shape.clone(), rec.values.clone())?;
        }
        Ok(())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}
