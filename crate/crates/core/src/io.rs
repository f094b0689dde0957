//! Binary blob + JSON sidecar storage.
//!
//! A blob is a flat run of little-endian `f64` values. Its sidecar lists every
//! named tensor stored in it (shape, offset and length in values), the seed
//! that produced it and free-form metadata.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Model, ModelSpec};
use crate::tensor::Tensor;

pub const SIDECAR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub version: u32,
    pub blob: String,
    pub entries: Vec<BlobEntry>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn f64s_to_le_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn le_bytes_to_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Corrupt(format!(
            "blob length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Writes `<dir>/<stem>.bin` and `<dir>/<stem>.json`; returns the sidecar path.
pub fn write_blob(
    dir: &Path,
    stem: &str,
    tensors: &[(&str, &Tensor)],
    seed: Option<u64>,
    meta: serde_json::Value,
) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut values = Vec::new();
    for (name, t) in tensors {
        entries.push(BlobEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: values.len(),
            len: t.len(),
        });
        values.extend_from_slice(t.data());
    }
    let blob_name = format!("{stem}.bin");
    let blob_path = dir.join(&blob_name);
    std::fs::write(&blob_path, f64s_to_le_bytes(&values)).map_err(|e| Error::io(&blob_path, e))?;
    let sidecar = Sidecar {
        version: SIDECAR_VERSION,
        blob: blob_name,
        entries,
        seed,
        meta,
    };
    let side_path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&side_path, e))?;
    std::fs::write(&side_path, text + "\n").map_err(|e| Error::io(&side_path, e))?;
    Ok(side_path)
}

/// Reads a sidecar and the blob it references (resolved next to the sidecar).
pub fn read_blob(sidecar_path: &Path) -> Result<(Sidecar, BTreeMap<String, Tensor>)> {
    let text = std::fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(sidecar_path, e))?;
    if sidecar.version != SIDECAR_VERSION {
        return Err(Error::Corrupt(format!(
            "{}: unsupported sidecar version {}",
            sidecar_path.display(),
            sidecar.version
        )));
    }
    let blob_path = sidecar_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&sidecar.blob);
    let bytes = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let values = le_bytes_to_f64s(&bytes)?;
    let mut tensors = BTreeMap::new();
    for e in &sidecar.entries {
        let end = e.offset.checked_add(e.len).filter(|&end| end <= values.len());
        let Some(end) = end else {
            return Err(Error::Corrupt(format!(
                "entry `{}` overruns blob of {} values",
                e.name,
                values.len()
            )));
        };
        tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), values[e.offset..end].to_vec())?);
    }
    Ok((sidecar, tensors))
}

/// Stores a model as one blob entry per parameterized layer; the sidecar
/// embeds the spec and the offset table.
pub fn save_model(model: &Model, dir: &Path, stem: &str) -> Result<PathBuf> {
    let mut owned = Vec::new();
    for (layer, slot) in model.spec().layers.iter().zip(model.slots()) {
        if slot.len == 0 {
            continue;
        }
        let t = Tensor::new(
            vec![slot.len],
            model.params()[slot.offset..slot.offset + slot.len].to_vec(),
        )?;
        owned.push((layer.id.clone(), t));
    }
    let refs: Vec<(&str, &Tensor)> = owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let meta = serde_json::json!({
        "kind": "model",
        "spec": model.spec(),
        "param_count": model.param_count(),
    });
    write_blob(dir, stem, &refs, Some(model.seed()), meta)
}

pub fn load_model(sidecar_path: &Path) -> Result<Model> {
    let (sidecar, tensors) = read_blob(sidecar_path)?;
    let spec: ModelSpec = serde_json::from_value(sidecar.meta["spec"].clone())
        .map_err(|e| Error::json(sidecar_path, e))?;
    let mut model = Model::from_params(&spec, vec![0.0; crate::nn::count_params(&spec)?], sidecar.seed.unwrap_or(0))?;
    let mut covered = 0;
    for (layer, slot) in spec.layers.iter().zip(model.slots().to_vec()) {
        if slot.len == 0 {
            continue;
        }
        let t = tensors
            .get(&layer.id)
            .ok_or_else(|| Error::Corrupt(format!("missing parameters for layer `{}`", layer.id)))?;
        if t.len() != slot.len {
            return Err(Error::Corrupt(format!(
                "layer `{}` has {} stored values, expected {}",
                layer.id,
                t.len(),
                slot.len
            )));
        }
        model.params_mut()[slot.offset..slot.offset + slot.len].copy_from_slice(t.data());
        covered += slot.len;
    }
    debug_assert_eq!(covered, model.param_count());
    Ok(model)
}
