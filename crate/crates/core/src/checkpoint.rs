//! Network checkpoints: a little-endian `f64` blob plus a JSON manifest that
//! records dimensions, context standardization and the tensor layout.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DfpsError, Result};
use crate::model::Dims;
use crate::networks::{ContextNorm, NetworkBundle};

pub const FORMAT: &str = "dfps-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub network: String,
    pub index: usize,
    pub rows: usize,
    pub cols: usize,
    /// Offset into the blob, in values.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dims: Dims,
    pub context_norm: ContextNorm,
    pub blob: String,
    pub values: usize,
    /// FNV-1a of the blob bytes, hex.
    pub checksum: String,
    pub tensors: Vec<TensorEntry>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Serialize `bundle`; `blob_name` is recorded in the manifest.
pub fn encode(bundle: &NetworkBundle, blob_name: &str) -> (Manifest, Vec<u8>) {
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, mlp) in bundle.mlps() {
        for (index, t) in mlp.tensors().into_iter().enumerate() {
            tensors.push(TensorEntry {
                network: name.to_string(),
                index,
                rows: t.rows,
                cols: t.cols,
                offset,
            });
            offset += t.data.len();
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        dims: bundle.dims,
        context_norm: bundle.context_norm.clone(),
        blob: blob_name.into(),
        values: offset,
        checksum: format!("{:016x}", fnv1a(&bytes)),
        tensors,
    };
    (manifest, bytes)
}

/// Rebuild a bundle from a manifest and its blob.
pub fn decode(manifest: &Manifest, bytes: &[u8]) -> Result<NetworkBundle> {
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(DfpsError::Config(format!("unsupported checkpoint {} v{}", manifest.format, manifest.version)));
    }
    if bytes.len() != manifest.values * 8 {
        return Err(DfpsError::Config("checkpoint blob length does not match the manifest".into()));
    }
    if format!("{:016x}", fnv1a(bytes)) != manifest.checksum {
        return Err(DfpsError::Config("checkpoint blob checksum mismatch".into()));
    }
    let dims = Dims::new(manifest.dims.n, manifest.dims.m1, manifest.dims.m2).map_err(|e| DfpsError::Config(e.to_string()))?;
    // Shapes come from the architecture; the values are overwritten below.
    let mut bundle = NetworkBundle::new(dims, &mut ChaCha8Rng::seed_from_u64(0));
    if manifest.context_norm.mean.len() != dims.context_dim() || manifest.context_norm.std.len() != dims.context_dim() {
        return Err(DfpsError::Config("checkpoint context normalization has the wrong width".into()));
    }
    bundle.context_norm = manifest.context_norm.clone();
    let names: Vec<&str> = bundle.mlps().iter().map(|(n, _)| *n).collect();
    let mut entries = manifest.tensors.iter();
    for (name, mlp) in names.into_iter().zip(bundle.mlps_mut()) {
        for (index, t) in mlp.tensors_mut().into_iter().enumerate() {
            let e = entries.next().ok_or_else(|| DfpsError::Config("checkpoint lists too few tensors".into()))?;
            if e.network != name || e.index != index || e.rows != t.rows || e.cols != t.cols {
                return Err(DfpsError::Config(format!(
                    "checkpoint tensor {}[{}] does not match the architecture",
                    e.network, e.index
                )));
            }
            let start = e.offset * 8;
            let end = start + t.data.len() * 8;
            if end > bytes.len() {
                return Err(DfpsError::Config("checkpoint tensor runs past the blob".into()));
            }
            for (v, chunk) in t.data.iter_mut().zip(bytes[start..end].chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
    }
    if entries.next().is_some() {
        return Err(DfpsError::Config("checkpoint lists too many tensors".into()));
    }
    Ok(bundle)
}

/// Write `<stem>.bin` and `<stem>.json` into `dir`; returns the manifest path.
pub fn save(bundle: &NetworkBundle, dir: &Path, stem: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| DfpsError::io(dir, e))?;
    let blob_name = format!("{stem}.bin");
    let (manifest, bytes) = encode(bundle, &blob_name);
    let blob_path = dir.join(&blob_name);
    fs::write(&blob_path, &bytes).map_err(|e| DfpsError::io(&blob_path, e))?;
    let manifest_path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, json).map_err(|e| DfpsError::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Load from a manifest path; the blob is resolved next to it.
pub fn load(manifest_path: &Path) -> Result<NetworkBundle> {
    let text = fs::read_to_string(manifest_path).map_err(|e| DfpsError::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let blob_path = manifest_path.parent().unwrap_or_else(|| Path::new(".")).join(&manifest.blob);
    let bytes = fs::read(&blob_path).map_err(|e| DfpsError::io(&blob_path, e))?;
    decode(&manifest, &bytes)
}
