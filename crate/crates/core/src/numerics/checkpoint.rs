//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   b"AGDCKPT\x01"
//! n_meta   u32
//!   key    u32 length + UTF-8 bytes
//!   value  u32 length + UTF-8 bytes
//! n_tensor u32
//!   name   u32 length + UTF-8 bytes
//!   rows   u64
//!   cols   u64
//!   data   rows*cols f64 (row-major)
//! ```
//!
//! Entries are written in key order, so identical contents give identical
//! bytes and reload is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use super::{NumericsError, Parameterized, Tensor};

const MAGIC: &[u8; 8] = b"AGDCKPT\x01";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn bad(msg: impl Into<String>) -> NumericsError {
    NumericsError::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NumericsError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, NumericsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NumericsError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, NumericsError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| bad(e.to_string()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Result<&str, NumericsError> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| bad(format!("missing metadata key `{key}`")))
    }

    pub fn put(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NumericsError> {
        self.tensors
            .get(name)
            .ok_or_else(|| bad(format!("missing tensor `{name}`")))
    }

    /// Stores every parameter of `module` under `prefix.<index>`.
    pub fn put_module(&mut self, prefix: &str, module: &impl Parameterized) {
        for (k, p) in module.parameters().into_iter().enumerate() {
            self.put(format!("{prefix}.{k}"), p.clone());
        }
    }

    /// Overwrites the parameters of `module` from `prefix.<index>` entries.
    pub fn load_module(&self, prefix: &str, module: &mut impl Parameterized) -> Result<(), NumericsError> {
        for (k, p) in module.parameters_mut().into_iter().enumerate() {
            let name = format!("{prefix}.{k}");
            let t = self.get(&name)?;
            if t.dim() != p.dim() {
                return Err(bad(format!(
                    "`{name}` has shape {:?}, module expects {:?}",
                    t.dim(),
                    p.dim()
                )));
            }
            p.assign(t);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend((self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend((t.nrows() as u64).to_le_bytes());
            out.extend((t.ncols() as u64).to_le_bytes());
            for v in t.iter() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, NumericsError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("bad magic header"));
        }
        let mut ck = Checkpoint::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| bad(format!("`{name}` extent overflow")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| bad("size overflow"))?)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::from_shape_vec((rows, cols), data).map_err(|e| bad(e.to_string()))?;
            ck.tensors.insert(name, t);
        }
        if r.pos != buf.len() {
            return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NumericsError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NumericsError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
