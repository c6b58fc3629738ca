//! Single-file checkpoints: parameters as safetensors plus a JSON manifest in
//! the header metadata.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{DiffusionLane, ModelConfig};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "difflane.manifest";

/// Everything that must agree between training and inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatKey {
    pub model: ModelConfig,
    pub t_max: usize,
    pub noise_scale: f64,
}

impl CompatKey {
    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub config_hash: String,
    pub key: CompatKey,
    /// Grid constants, redundant with the model config, for readers that
    /// only want the geometry.
    pub grid: GridInfo,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Free-form run configuration (not hashed).
    pub run: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    pub img_w: f64,
    pub img_h: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub n_points: usize,
}

impl Manifest {
    pub fn new(model: &DiffusionLane, t_max: usize, noise_scale: f64, step: u64, run: serde_json::Value) -> Self {
        let key = CompatKey { model: model.config().clone(), t_max, noise_scale };
        let g = model.grid();
        Self {
            format: FORMAT_VERSION,
            config_hash: key.hash(),
            key,
            grid: GridInfo {
                img_w: g.img_w(),
                img_h: g.img_h(),
                y_min: g.y_min(),
                y_max: g.y_max(),
                n_points: g.n_points(),
            },
            step,
            run,
        }
    }
}

fn ck_err(path: &Path, msg: impl ToString) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), msg: msg.to_string() }
}

pub fn save(path: &Path, model: &DiffusionLane, manifest: &Manifest) -> Result<()> {
    let dtype = model.dtype();
    let mut blobs: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (name, var) in model.params().iter() {
        let flat = var.as_tensor().flatten_all()?;
        let bytes: Vec<u8> = match dtype {
            DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            _ => flat.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        };
        blobs.push((name.clone(), var.dims().to_vec(), bytes));
    }
    let st_dtype = if dtype == DType::F64 { Dtype::F64 } else { Dtype::F32 };
    let views = blobs
        .iter()
        .map(|(n, s, b)| Ok((n.clone(), TensorView::new(st_dtype, s.clone(), b).map_err(|e| ck_err(path, e))?)))
        .collect::<Result<Vec<_>>>()?;
    let meta =
        HashMap::from([(MANIFEST_KEY.to_string(), serde_json::to_string(manifest).map_err(|e| ck_err(path, e))?)]);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| ck_err(path, e))?;
    }
    safetensors::serialize_to_file(views, Some(meta), path).map_err(|e| ck_err(path, e))
}

/// Reads only the manifest.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path).map_err(|e| ck_err(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| ck_err(path, e))?;
    parse_manifest(path, meta.metadata())
}

fn parse_manifest(path: &Path, meta: &Option<HashMap<String, String>>) -> Result<Manifest> {
    let raw = meta.as_ref().and_then(|m| m.get(MANIFEST_KEY)).ok_or_else(|| ck_err(path, "missing manifest"))?;
    let m: Manifest = serde_json::from_str(raw).map_err(|e| ck_err(path, format!("bad manifest: {e}")))?;
    if m.format != FORMAT_VERSION {
        return Err(ck_err(path, format!("format {} not supported", m.format)));
    }
    if m.key.hash() != m.config_hash {
        return Err(ck_err(path, "manifest hash does not match its own config"));
    }
    Ok(m)
}

/// Loads a checkpoint. With `expected`, the stored config hash must match.
pub fn load(path: &Path, expected: Option<&CompatKey>) -> Result<(DiffusionLane, Manifest)> {
    let bytes = std::fs::read(path).map_err(|e| ck_err(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| ck_err(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| ck_err(path, e))?;
    let manifest = parse_manifest(path, meta.metadata())?;
    if let Some(want) = expected {
        if want.hash() != manifest.config_hash {
            return Err(ck_err(
                path,
                format!("config hash mismatch: checkpoint {} vs requested {}", manifest.config_hash, want.hash()),
            ));
        }
    }
    let mut dtype = DType::F32;
    let tensors = st.tensors();
    if tensors.iter().any(|(_, v)| v.dtype() == Dtype::F64) {
        dtype = DType::F64;
    }
    let model = DiffusionLane::with_dtype(manifest.key.model.clone(), dtype)?;
    if tensors.len() != model.params().len() {
        return Err(ck_err(path, format!("{} tensors stored, model has {}", tensors.len(), model.params().len())));
    }
    for (name, var) in model.params().iter() {
        let view = st.tensor(name).map_err(|e| ck_err(path, format!("{name}: {e}")))?;
        if view.shape() != var.dims() {
            return Err(ck_err(path, format!("{name}: shape {:?} vs {:?}", view.shape(), var.dims())));
        }
        let t = match view.dtype() {
            Dtype::F64 => {
                let v: Vec<f64> =
                    view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, view.shape(), &Device::Cpu)?
            }
            Dtype::F32 => {
                let v: Vec<f32> =
                    view.data().chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, view.shape(), &Device::Cpu)?
            }
            other => return Err(ck_err(path, format!("{name}: unsupported dtype {other:?}"))),
        };
        var.set(&t.to_dtype(dtype)?)?;
    }
    Ok((model, manifest))
}
