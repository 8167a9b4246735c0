//! Checkpoint directories.
//!
//! ```text
//! <dir>/config.json     model config
//! <dir>/manifest.json   format tag, step, tensor names, shapes, offsets
//! <dir>/weights.bin     every tensor as little-endian f32, manifest order
//! ```
//!
//! Offsets and lengths count elements, not bytes. Tensor order is the
//! weight tree's visit order, and loading rejects any name or shape that
//! differs from the layout the config implies.

use std::fs;
use std::io::Write;
use std::path::Path;

use conceptmoe_core::model::{ModelConfig, Weights};
use conceptmoe_core::numerics::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::io::{load_json, write_json};

pub const FORMAT: &str = "conceptmoe-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    /// Optimizer updates behind these weights.
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

pub struct Checkpoint {
    pub config: ModelConfig,
    pub weights: Weights<Tensor<f32>>,
    pub step: u64,
}

pub fn save(dir: &Path, config: &ModelConfig, weights: &Weights<Tensor<f32>>, step: u64) -> Result<()> {
    weights.check_layout(config)?;
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let mut tensors = Vec::new();
    let mut bytes = Vec::with_capacity(weights.param_count() * 4);
    let mut offset = 0;
    for (name, t) in weights.names().into_iter().zip(weights.flatten()) {
        tensors.push(TensorEntry { name, shape: t.shape().to_vec(), offset, len: t.numel() });
        offset += t.numel();
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest { format: FORMAT.into(), version: VERSION, dtype: "f32".into(), step, tensors };
    write_json(&dir.join("config.json"), config)?;
    write_json(&dir.join("manifest.json"), &manifest)?;
    let path = dir.join("weights.bin");
    let mut f = fs::File::create(&path).map_err(|e| AppError::io(&path, e))?;
    f.write_all(&bytes).and_then(|_| f.flush()).map_err(|e| AppError::io(&path, e))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let config: ModelConfig = load_json(&dir.join("config.json"))?;
    config.validate()?;
    let mpath = dir.join("manifest.json");
    let manifest: Manifest = load_json(&mpath)?;
    let bad = |msg: String| AppError::Json { path: mpath.clone(), key: "tensors".into(), msg };
    if manifest.format != FORMAT || manifest.version != VERSION || manifest.dtype != "f32" {
        return Err(AppError::Json {
            path: mpath.clone(),
            key: "format".into(),
            msg: format!(
                "expected {FORMAT} v{VERSION} f32, found {} v{} {}",
                manifest.format, manifest.version, manifest.dtype
            ),
        });
    }
    let wpath = dir.join("weights.bin");
    let raw = fs::read(&wpath).map_err(|e| AppError::io(&wpath, e))?;
    let template = Weights::<Tensor<f32>>::init(&config, 0)?;
    let names = template.names();
    if names.len() != manifest.tensors.len() {
        return Err(bad(format!("{} tensors listed, config implies {}", manifest.tensors.len(), names.len())));
    }
    let total: usize = manifest.tensors.iter().map(|t| t.len).sum();
    if raw.len() != total * 4 {
        return Err(AppError::io(
            &wpath,
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{} bytes, manifest needs {}", raw.len(), total * 4),
            ),
        ));
    }
    let mut tensors = Vec::with_capacity(names.len());
    for ((entry, name), want) in manifest.tensors.iter().zip(&names).zip(template.flatten()) {
        if &entry.name != name || entry.shape != want.shape() || entry.len != want.numel() {
            return Err(bad(format!(
                "entry {} {:?} does not match expected {} {:?}",
                entry.name,
                entry.shape,
                name,
                want.shape()
            )));
        }
        let end = entry
            .offset
            .checked_add(entry.len)
            .filter(|&e| e <= total)
            .ok_or_else(|| bad(format!("{} overruns weights.bin", entry.name)))?;
        let data = raw[entry.offset * 4..end * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push(Tensor::new(entry.shape.clone(), data)?);
    }
    let weights = Weights::from_flat(&template, tensors)?;
    Ok(Checkpoint { config, weights, step: manifest.step })
}
