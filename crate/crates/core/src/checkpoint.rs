//! Binary named-tensor files.
//!
//! Layout, all integers little-endian `u32`:
//! `"MSQK"`, version, tensor count, then per tensor: name length, UTF-8
//! name, ndim, dims, and `f64` little-endian payload.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MSQK";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let payload: usize = tensors.iter().map(|(n, t)| 12 + n.len() + 4 * t.ndim() + 8 * t.numel()).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        if !seen.insert(*name) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated file while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic, not an MSQK file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let len = r.u32(&format!("name length of tensor {i}"))? as usize;
        let name = std::str::from_utf8(r.take(len, &format!("name of tensor {i}"))?)
            .map_err(|_| Error::Checkpoint(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let ndim = r.u32(&format!("rank of {name}"))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32(&format!("shape of {name}"))? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: shape {shape:?} overflows")))?;
        let raw = r.take(numel, &format!("payload of {name}"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push((name.clone(), Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after last tensor", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(tensors)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_params(path: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
    let named: Vec<(&str, &Tensor)> = store.names().iter().map(String::as_str).zip(store.tensors()).collect();
    save(path, &named)
}

/// Replaces every parameter of `store` with the checkpoint's tensor of the
/// same name. Nothing is written unless all names and shapes match.
pub fn apply(store: &mut ParamStore, tensors: Vec<(String, Tensor)>) -> Result<()> {
    let mut staged: Vec<Option<Tensor>> = vec![None; store.len()];
    for (name, t) in tensors {
        let id = store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is not a parameter of this model")))?;
        let want = store.get(id).shape();
        if t.shape() != want {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: checkpoint shape {:?} does not match configured shape {want:?}",
                t.shape()
            )));
        }
        staged[id.index()] = Some(t);
    }
    if let Some(i) = staged.iter().position(Option::is_none) {
        return Err(Error::Checkpoint(format!("tensor {} missing from checkpoint", store.names()[i])));
    }
    for (slot, t) in store.tensors_mut().iter_mut().zip(staged) {
        *slot = t.expect("checked above");
    }
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>, store: &mut ParamStore) -> Result<()> {
    apply(store, load(path)?)
}
