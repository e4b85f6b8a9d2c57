//! Weights on disk: a little-endian binary tensor file plus a JSON manifest
//! (`<file>.json`) carrying the model config and tensor table.
//!
//! Binary layout: magic `STORMGN1`, u32 tensor count, then per tensor a u32
//! name length, the UTF-8 name, u32 rank, u64 dims, and the f64 values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GridNet, GridNetConfig};
use crate::tape::Tensor;

const MAGIC: &[u8; 8] = b"STORMGN1";
pub const MANIFEST_FORMAT: &str = "storm-gridnet-weights";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: GridNetConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance, e.g. the training report.
    #[serde(default)]
    pub notes: serde_json::Value,
}

pub fn manifest_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Weights { path: path.to_path_buf(), msg: msg.into() }
}

pub fn encode(model: &GridNet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.param_names().iter().zip(model.params()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

/// Named tensors from the binary file.
pub fn decode(buf: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { buf, pos: 0 };
    let trunc = || bad(path, "truncated tensor file");
    if c.take(8) != Some(MAGIC) {
        return Err(bad(path, "not a weights file (bad magic)"));
    }
    let count = c.u32().ok_or_else(trunc)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = c.u32().ok_or_else(trunc)? as usize;
        let name = std::str::from_utf8(c.take(len).ok_or_else(trunc)?).map_err(|_| bad(path, "tensor name is not UTF-8"))?.to_string();
        let rank = c.u32().ok_or_else(trunc)? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Option<Vec<_>>>().ok_or_else(trunc)?;
        let n = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or_else(|| bad(path, "tensor too large"))?;
        let bytes = c.take(n.checked_mul(8).ok_or_else(trunc)?).ok_or_else(trunc)?;
        let data: Vec<f64> = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(bad(path, format!("tensor {name} holds non-finite value {v}")));
        }
        out.push((name, Tensor::new(shape, data)));
    }
    if c.pos != buf.len() {
        return Err(bad(path, "trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn manifest_of(model: &GridNet, notes: serde_json::Value) -> Manifest {
    Manifest {
        format: MANIFEST_FORMAT.to_string(),
        version: 1,
        config: *model.config(),
        tensors: model.param_names().into_iter().zip(model.params()).map(|(name, t)| TensorEntry { name, shape: t.shape.clone() }).collect(),
        notes,
    }
}

pub fn save(model: &GridNet, path: &Path, notes: serde_json::Value) -> Result<()> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| Error::Io { path: p, source }
    };
    fs::write(path, encode(model)).map_err(io(path))?;
    let mpath = manifest_path(path);
    let text = serde_json::to_string_pretty(&manifest_of(model, notes)).expect("manifest serializes");
    fs::write(&mpath, text + "\n").map_err(io(&mpath))?;
    Ok(())
}

/// Loads a model, checking the binary tensors against the manifest.
pub fn load(path: &Path) -> Result<(GridNet, Manifest)> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|source| Error::Io { path: mpath.clone(), source })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(&mpath, e.to_string()))?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != 1 {
        return Err(bad(&mpath, format!("unsupported manifest {} v{}", manifest.format, manifest.version)));
    }
    let buf = fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let named = decode(&buf, path)?;
    let listed: Vec<(&str, &[usize])> = manifest.tensors.iter().map(|t| (t.name.as_str(), t.shape.as_slice())).collect();
    let stored: Vec<(&str, &[usize])> = named.iter().map(|(n, t)| (n.as_str(), t.shape.as_slice())).collect();
    if listed != stored {
        return Err(bad(path, "tensor table does not match the manifest"));
    }
    let expected: Vec<String> = manifest.config.param_shapes().into_iter().map(|(n, _)| n).collect();
    if expected.iter().map(String::as_str).ne(named.iter().map(|(n, _)| n.as_str())) {
        return Err(bad(path, "tensor names do not match the model layout"));
    }
    let model = GridNet::from_params(manifest.config, named.into_iter().map(|(_, t)| t).collect()).map_err(|e| bad(path, e.to_string()))?;
    Ok((model, manifest))
}
