use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParameterStore, Tensor};

pub const MAGIC: &[u8; 4] = b"BSML";
pub const VERSION: u32 = 1;

/// Named tensors and opaque blobs plus the configuration they belong to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
    pub blobs: Vec<(String, Vec<u8>)>,
}

impl Checkpoint {
    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn push_blob(&mut self, name: impl Into<String>, b: Vec<u8>) {
        self.blobs.push((name.into(), b));
    }

    /// Adds every entry of `store` as `{prefix}/{name}`.
    pub fn push_store(&mut self, prefix: &str, store: &ParameterStore) {
        for (name, value) in store.iter() {
            self.push_tensor(format!("{prefix}/{name}"), value.clone());
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Compatibility(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn blob(&self, name: &str) -> Result<&[u8]> {
        self.blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
            .ok_or_else(|| Error::Compatibility(format!("checkpoint has no blob `{name}`")))
    }

    /// Overwrites every entry of `store` from `{prefix}/{name}`, checking
    /// shapes.
    pub fn restore_store(&self, prefix: &str, store: &mut ParameterStore) -> Result<()> {
        let names: Vec<String> = store.names().to_vec();
        for name in names {
            let t = self.tensor(&format!("{prefix}/{name}"))?;
            if t.shape() != store.get(&name)?.shape() {
                return Err(Error::Compatibility(format!(
                    "shape of `{prefix}/{name}` is {:?}, expected {:?}",
                    t.shape(),
                    store.get(&name)?.shape()
                )));
            }
            store.set(&name, t.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, b) in &self.blobs {
            put_bytes(&mut out, name.as_bytes());
            put_bytes(&mut out, b);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint: bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config = r.string()?;
        let n = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Integrity("tensor too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let n = r.u32()?;
        let mut blobs = Vec::new();
        for _ in 0..n {
            let name = r.string()?;
            let len = r.u32()? as usize;
            blobs.push((name, r.take(len)?.to_vec()));
        }
        if r.pos != bytes.len() {
            return Err(Error::Integrity(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, tensors, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| {
            Error::Integrity(format!("truncated checkpoint: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
    }
}
