//! Model directories: `config.json`, `manifest.json` (name -> shape) and
//! one little-endian f32 blob per parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{ModelConfig, ModelParams, Param};
use super::PointwiseModel;
use crate::error::{Error, Result};

/// What a model directory contains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Mednext(ModelConfig),
    /// Per-voxel affine map from input channels to logits.
    Pointwise { in_channels: usize, num_classes: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoredModel {
    Mednext { config: ModelConfig, params: ModelParams<f32> },
    Pointwise(PointwiseModel),
}

impl StoredModel {
    pub fn spec(&self) -> ModelSpec {
        match self {
            StoredModel::Mednext { config, .. } => ModelSpec::Mednext(config.clone()),
            StoredModel::Pointwise(m) => ModelSpec::Pointwise {
                in_channels: m.in_channels,
                num_classes: m.num_classes,
            },
        }
    }

    fn tensors(&self) -> BTreeMap<String, Param<f32>> {
        match self {
            StoredModel::Mednext { params, .. } => params.tensors.clone(),
            StoredModel::Pointwise(m) => m.tensors(),
        }
    }
}

fn blob_name(name: &str) -> String {
    format!("{name}.f32")
}

pub fn save_model(dir: &Path, model: &StoredModel) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensors = model.tensors();
    let manifest: BTreeMap<&String, &Vec<usize>> = tensors.iter().map(|(n, p)| (n, &p.shape)).collect();
    for (name, p) in &tensors {
        let path = dir.join(blob_name(name));
        let bytes: Vec<u8> = p.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let write_json = |file: &str, value: serde_json::Value| -> Result<()> {
        let path = dir.join(file);
        let text = serde_json::to_string_pretty(&value).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write_json("config.json", serde_json::to_value(model.spec()).expect("spec serialises"))?;
    // manifest last: a directory without one is incomplete
    write_json("manifest.json", serde_json::to_value(manifest).expect("manifest serialises"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn load_model(dir: &Path) -> Result<StoredModel> {
    let spec: ModelSpec = read_json(&dir.join("config.json"))?;
    let manifest: BTreeMap<String, Vec<usize>> = read_json(&dir.join("manifest.json"))?;
    let mut tensors = BTreeMap::new();
    for (name, shape) in manifest {
        if name.contains('/') || name.contains("..") {
            return Err(Error::Format(format!("bad parameter name {name:?} in manifest")));
        }
        let path = dir.join(blob_name(&name));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let len: usize = shape.iter().product();
        if bytes.len() != len * 4 {
            return Err(Error::Format(format!("{name}: {} bytes, manifest shape {shape:?} needs {}", bytes.len(), len * 4)));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.insert(name, Param { shape, data });
    }
    match spec {
        ModelSpec::Mednext(config) => {
            config.validate()?;
            let params = ModelParams { tensors };
            params.check_layout(&config)?;
            Ok(StoredModel::Mednext { config, params })
        }
        ModelSpec::Pointwise { in_channels, num_classes } => {
            PointwiseModel::from_tensors(in_channels, num_classes, &tensors).map(StoredModel::Pointwise)
        }
    }
}
