//! Binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "TOKFUSE\0" | u32 version | u64 meta_len | meta (JSON)
//! u64 count | count × { u32 name_len | name | u32 ndim | ndim × u64 | f64 × numel }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::System;

pub const MAGIC: &[u8; 8] = b"TOKFUSE\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub dtype: String,
    pub seed: u64,
    pub config_hash: String,
    pub vocabulary: Vec<String>,
}

impl CheckpointMeta {
    pub fn new(system: &System, seed: u64, config_hash: impl Into<String>) -> Self {
        CheckpointMeta {
            dtype: "f64".into(),
            seed,
            config_hash: config_hash.into(),
            vocabulary: system.tokenizer.words().to_vec(),
        }
    }
}

pub fn to_bytes(system: &System, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(system.store.len() as u64).to_le_bytes());
    for (_, p) in system.store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(path: &Path, system: &System, meta: &CheckpointMeta) -> Result<()> {
    let bytes = to_bytes(system, meta)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
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

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflow".into()))
    }
}

/// Parsed checkpoint contents.
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {version}, this build reads version {VERSION}"
        )));
    }
    let meta_len = r.usize()?;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let count = r.usize()?;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((name, shape, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(Checkpoint { meta, params })
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Copies checkpoint parameters into a system built from the same config.
/// Refuses on config hash, vocabulary, name or shape mismatch.
pub fn restore(system: &mut System, ckpt: &Checkpoint, expected_hash: Option<&str>) -> Result<()> {
    if ckpt.meta.dtype != "f64" {
        return Err(Error::Checkpoint(format!("unsupported dtype `{}`", ckpt.meta.dtype)));
    }
    if let Some(h) = expected_hash {
        if h != ckpt.meta.config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {}, current config {h}",
                ckpt.meta.config_hash
            )));
        }
    }
    if ckpt.meta.vocabulary != system.tokenizer.words() {
        return Err(Error::Checkpoint(
            "vocabulary in checkpoint differs from the model's vocabulary".into(),
        ));
    }
    if ckpt.params.len() != system.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            ckpt.params.len(),
            system.store.len()
        )));
    }
    for (name, shape, data) in &ckpt.params {
        let id = system
            .store
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if &system.store.get(id).shape != shape {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for `{name}`: checkpoint {shape:?}, model {:?}",
                system.store.get(id).shape
            )));
        }
        system.store.set_value(id, data)?;
    }
    Ok(())
}

pub fn load(path: &Path, system: &mut System, expected_hash: Option<&str>) -> Result<CheckpointMeta> {
    let ckpt = read(path)?;
    restore(system, &ckpt, expected_hash)?;
    Ok(ckpt.meta)
}
