//! Checkpoint layout, little-endian:
//!
//! ```text
//! b"GTCNCKPT"  u32 version
//! u32 tag length, tag bytes (architecture)
//! u32 hyperparameter count, then per entry: u32 key length, key, f64 value
//! u32 parameter count, then per entry:
//!     u32 name length, name, u32 rank, rank × u64 extents, f64 payload
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use super::{ModelConfig, ModelKind, ModelState};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const CKPT_MAGIC: &[u8; 8] = b"GTCNCKPT";
pub const CKPT_VERSION: u32 = 1;

impl ModelState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend((s.len() as u32).to_le_bytes());
            out.extend(s.as_bytes());
        };
        out.extend(CKPT_MAGIC);
        out.extend(CKPT_VERSION.to_le_bytes());
        put_str(&mut out, self.kind().tag());
        let hyper = self.config.to_pairs();
        out.extend((hyper.len() as u32).to_le_bytes());
        for (k, v) in hyper {
            put_str(&mut out, k);
            out.extend(v.to_le_bytes());
        }
        out.extend((self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_str(&mut out, name);
            out.extend((t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != CKPT_MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Config(format!(
                "{}: checkpoint version {version}, this build reads {CKPT_VERSION}",
                path.display()
            )));
        }
        let kind: ModelKind = r.string()?.parse()?;
        let mut hyper = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            hyper.insert(k, r.f64()?);
        }
        let config = ModelConfig::from_pairs(kind, &hyper)?;
        let mut params = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.ok_or_else(|| Error::format(path, "parameter size overflow"))?;
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| Error::format(path, format!("{name}: {e}")))?;
            params.insert(name, Arc::new(t));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes"));
        }
        let state = ModelState { config, params };
        let expected = ModelState::init(state.config.clone(), 0)?;
        let shapes = |s: &ModelState| s.params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect::<Vec<_>>();
        if shapes(&state) != shapes(&expected) {
            return Err(Error::Config(format!(
                "{}: parameters do not match a {} model with the stored hyperparameters",
                path.display(),
                kind
            )));
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and insists on the given architecture.
    pub fn load_expecting(path: &Path, kind: ModelKind) -> Result<Self> {
        let state = Self::load(path)?;
        if state.kind() != kind {
            return Err(Error::Config(format!(
                "{} holds a {} model, expected {kind}",
                path.display(),
                state.kind()
            )));
        }
        Ok(state)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?.to_vec();
        String::from_utf8(raw).map_err(|_| Error::format(self.path, "non-UTF-8 name"))
    }
}
