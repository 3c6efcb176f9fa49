use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{rng_from_seed, Tensor};
use crate::params::{named_tensors, Parameters};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Number of f32 elements.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub step: u64,
    pub config: EncoderConfig,
    pub tensors: Vec<TensorEntry>,
}

fn corrupt(dir: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: dir.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes `manifest.json` and `params.bin` (little-endian f32, names sorted) into `dir`.
pub fn save_checkpoint(model: &Encoder<f32>, step: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = named_tensors(model);
    tensors.sort_by(|a, b| a.0.cmp(&b.0));
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, _, t) in tensors {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: blob.len(),
            len: t.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        step,
        config: model.config.clone(),
        tensors: entries,
    };
    fs::write(dir.join(PARAMS_FILE), &blob)?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != MANIFEST_VERSION {
        return Err(Error::ManifestVersion(version));
    }
    Ok(serde_json::from_value(raw)?)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Encoder<f32>, Manifest)> {
    let manifest = read_manifest(dir)?;
    let blob = fs::read(dir.join(PARAMS_FILE))?;
    let expected: usize = manifest.tensors.iter().map(|e| e.len * 4).sum();
    if blob.len() != expected {
        return Err(corrupt(dir, format!("params.bin has {} bytes, manifest describes {expected}", blob.len())));
    }
    // Parameters are overwritten below; the seed only fills them transiently.
    let mut model = Encoder::<f32>::new(manifest.config.clone(), &mut rng_from_seed(0))?;
    let mut expected_names: Vec<(String, Vec<usize>)> =
        named_tensors(&model).into_iter().map(|(n, _, t)| (n, t.shape().to_vec())).collect();
    expected_names.sort();
    let mut listed: Vec<(String, Vec<usize>)> = manifest.tensors.iter().map(|e| (e.name.clone(), e.shape.clone())).collect();
    listed.sort();
    if listed != expected_names {
        return Err(corrupt(dir, "tensor names or shapes do not match the configured model"));
    }
    let mut result = Ok(());
    model.visit_mut("", &mut |name, _, t| {
        let e = manifest.tensors.iter().find(|e| e.name == name).expect("name checked above");
        if e.len != t.len() || e.offset + e.len * 4 > blob.len() {
            result = Err(corrupt(dir, format!("entry {name} out of bounds")));
            return;
        }
        let data: Vec<f32> = blob[e.offset..e.offset + e.len * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        *t = Tensor::new(e.shape.clone(), data).expect("shape checked above");
    });
    result?;
    Ok((model, manifest))
}

/// Directory of the checkpoint at `step` under `root`.
pub fn checkpoint_dir(root: &Path, step: u64) -> PathBuf {
    root.join(format!("step-{step:07}"))
}
