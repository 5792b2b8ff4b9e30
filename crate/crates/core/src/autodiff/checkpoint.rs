//! Binary tensor container plus a JSON manifest written next to it.
//!
//! Layout: `CCKPT001`, u32 tensor count, then per tensor u32 name length,
//! UTF-8 name, u32 rank, u64 dims, f64 data. All integers little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"CCKPT001";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}: not a checkpoint (bad magic)")]
    BadMagic(PathBuf),
    #[error("{0}: truncated")]
    Truncated(PathBuf),
    #[error("manifest {path}: {source}")]
    Manifest { path: PathBuf, source: serde_json::Error },
    #[error("checkpoint checksum {found} does not match manifest {expected}")]
    Checksum { expected: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub dtype: String,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    pub checksum: String,
    /// Model hyperparameters, checked on reload by the owner.
    pub hyper: serde_json::Value,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

pub fn save_tensors(
    path: &Path,
    store: &ParamStore,
    step: u64,
    hyper: serde_json::Value,
) -> Result<CheckpointManifest, CheckpointError> {
    let mut buf = Vec::with_capacity(16 + store.num_scalars() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    let mut tensors = Vec::new();
    for (name, t) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry { name: name.clone(), shape: t.shape.clone() });
    }
    let manifest = CheckpointManifest {
        format: "CCKPT001".into(),
        dtype: "f64".into(),
        step,
        tensors,
        checksum: store.checksum(),
        hyper,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(path, &buf).map_err(io(path))?;
    let mpath = manifest_path(path);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, json).map_err(io(&mpath))?;
    Ok(manifest)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Truncated(self.path.to_path_buf()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }
}

pub fn load_tensors(path: &Path) -> Result<(ParamStore, CheckpointManifest), CheckpointError> {
    let bytes = fs::read(path).map_err(io(path))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(CheckpointError::BadMagic(path.to_path_buf()));
    }
    let mut store = ParamStore::new();
    for _ in 0..r.u32()? {
        let n = r.u32()?;
        let name = String::from_utf8_lossy(r.take(n)?).into_owned();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count.checked_mul(8).ok_or_else(|| CheckpointError::Truncated(path.to_path_buf()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        store.insert(name, Tensor::new(shape, data));
    }
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(io(&mpath))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|source| CheckpointError::Manifest { path: mpath, source })?;
    let found = store.checksum();
    if found != manifest.checksum {
        return Err(CheckpointError::Checksum { expected: manifest.checksum, found });
    }
    Ok((store, manifest))
}
