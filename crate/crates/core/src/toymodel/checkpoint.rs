//! Single-file checkpoints: magic, version, JSON manifest, then every
//! parameter as little-endian f32 in layout order.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{parameter_layout, ModelConfig, ToyModel};
use crate::digest;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TABPRB\0C";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    payload_bytes: usize,
    digest: String,
}

/// Writes `path` and a `model.json` with the config next to it.
pub fn save_checkpoint(model: &ToyModel, path: &Path) -> Result<()> {
    let payload = model.parameter_bytes()?;
    let mut offset = 0;
    let tensors = parameter_layout(model.config())
        .into_iter()
        .map(|(name, shape)| {
            let entry = TensorEntry { name, offset, shape };
            offset += entry.shape.iter().product::<usize>() * 4;
            entry
        })
        .collect();
    let manifest = Manifest {
        config: model.config().clone(),
        tensors,
        payload_bytes: payload.len(),
        digest: digest::short_sha(&payload),
    };
    let manifest = serde_json::to_vec(&manifest)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut write = |b: &[u8]| f.write_all(b).map_err(|e| Error::io(&tmp, e));
        write(CHECKPOINT_MAGIC)?;
        write(&CHECKPOINT_VERSION.to_le_bytes())?;
        write(&(manifest.len() as u32).to_le_bytes())?;
        write(&manifest)?;
        write(&payload)?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    let config_path = path.with_file_name("model.json");
    fs::write(&config_path, serde_json::to_string_pretty(model.config())?).map_err(|e| Error::io(&config_path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ToyModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |detail: &str| Error::Corruption { path: path.to_path_buf(), detail: detail.to_string() };
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing checkpoint magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(&format!("unsupported checkpoint version {version}")));
    }
    let mlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let manifest_end = 16 + mlen;
    if bytes.len() < manifest_end {
        return Err(corrupt("truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..manifest_end])?;
    let payload = &bytes[manifest_end..];
    if payload.len() != manifest.payload_bytes {
        return Err(corrupt("payload length does not match manifest"));
    }
    if digest::short_sha(payload) != manifest.digest {
        return Err(corrupt("payload digest mismatch"));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + n * 4;
        if end > payload.len() {
            return Err(corrupt(&format!("tensor {} overruns payload", entry.name)));
        }
        let values: Vec<f32> = payload[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::from_vec(values, entry.shape.as_slice(), &Device::Cpu)?);
    }
    ToyModel::from_params(manifest.config, tensors)
}
