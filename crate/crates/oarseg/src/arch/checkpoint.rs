//! Checkpoint format: `model.json` (spec, seed, parameter manifest) plus
//! `model.bin` (little-endian 32-bit floats concatenated in manifest
//! order). Buffers (running statistics) are persisted alongside
//! trainable parameters so eval-mode forwards reproduce exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, Model, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset_bytes: u64,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    spec: ModelSpec,
    seed: u64,
    dtype: String,
    manifest: Vec<ManifestEntry>,
}

/// Write `model.json` + `model.bin` into `dir` (created if missing).
pub fn save_model<T: Element>(model: &Model<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), &e))?;
    let mut manifest = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for entry in model.params.entries() {
        manifest.push(ManifestEntry {
            name: entry.name.clone(),
            shape: entry.tensor.shape().to_vec(),
            offset_bytes: blob.len() as u64,
        });
        for v in entry.tensor.values() {
            blob.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    let header = ModelHeader {
        spec: model.spec.clone(),
        seed: model.seed,
        dtype: "f32le".to_string(),
        manifest,
    };
    let json = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::data(format!("serialize header: {e}")))?;
    let json_path = dir.join("model.json");
    fs::write(&json_path, json).map_err(|e| Error::io(json_path.display().to_string(), &e))?;
    let bin_path = dir.join("model.bin");
    let mut f =
        fs::File::create(&bin_path).map_err(|e| Error::io(bin_path.display().to_string(), &e))?;
    f.write_all(&blob)
        .map_err(|e| Error::io(bin_path.display().to_string(), &e))?;
    Ok(())
}

/// Rebuild the model from its spec and seed, then overwrite parameters
/// from the binary payload.
pub fn load_model<T: Element>(dir: &Path) -> Result<Model<T>> {
    let json_path = dir.join("model.json");
    let text =
        fs::read_to_string(&json_path).map_err(|e| Error::io(json_path.display().to_string(), &e))?;
    let header: ModelHeader =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("parse model.json: {e}")))?;
    if header.dtype != "f32le" {
        return Err(Error::data(format!("unknown dtype {}", header.dtype)));
    }
    let bin_path = dir.join("model.bin");
    let blob = fs::read(&bin_path).map_err(|e| Error::io(bin_path.display().to_string(), &e))?;
    let mut model = build_model::<T>(&header.spec, header.seed)?;
    if header.manifest.len() != model.params.len() {
        return Err(Error::data(format!(
            "manifest has {} entries, model has {}",
            header.manifest.len(),
            model.params.len()
        )));
    }
    for (entry, id) in header
        .manifest
        .iter()
        .zip(model.params.ids().collect::<Vec<_>>())
    {
        let reg = model.params.get(id);
        if reg.name != entry.name || reg.tensor.shape() != entry.shape.as_slice() {
            return Err(Error::data(format!(
                "manifest entry '{}' {:?} does not match registry '{}' {:?}",
                entry.name,
                entry.shape,
                reg.name,
                reg.tensor.shape()
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset_bytes as usize;
        let end = start + numel * 4;
        if end > blob.len() {
            return Err(Error::data(format!(
                "model.bin truncated: need {end} bytes, have {}",
                blob.len()
            )));
        }
        let data: Vec<T> = blob[start..end]
            .chunks_exact(4)
            .map(|b| T::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        model.params.set_tensor(id, Tensor::from_vec(&entry.shape, data)?);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchKind, ModelSpec};

    #[test]
    fn checkpoint_roundtrip_bitexact() {
        let dir = std::env::temp_dir().join("oarseg_ckpt_test");
        let spec = ModelSpec::desk(ArchKind::Unet, 1, 4);
        let model = build_model::<f32>(&spec, 77).unwrap();
        save_model(&model, &dir).unwrap();
        let loaded = load_model::<f32>(&dir).unwrap();
        assert_eq!(loaded.seed, 77);
        for (a, b) in model.params.entries().iter().zip(loaded.params.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.values(), b.tensor.values());
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
