//! Single-file checkpoint archive.
//!
//! ```text
//! magic    8 bytes   "AMBSCKPT"
//! version  u32 LE
//! hlen     u64 LE    length of the JSON header
//! header   hlen bytes
//! payload  every tensor as f64 LE, in header order
//! ```
//!
//! The header carries the model config, free-form run metadata and the
//! tensor index (name, shape, frozen flag). Parameter order is the
//! [`ParamStore`] insertion order, which [`Model::from_params`] checks.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"AMBSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A decoded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    /// Run metadata stored alongside the parameters (training config, step).
    pub meta: serde_json::Value,
}

pub fn encode(model: &Model, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let store = &model.params;
    let tensors = (0..store.len())
        .map(|i| TensorEntry {
            name: store.name(i).to_string(),
            shape: store.value(i).shape().to_vec(),
            frozen: store.is_frozen(i),
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        model: model.config().clone(),
        meta: meta.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + store.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |msg: &str| Error::format(path, msg.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint archive"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = 20usize
        .checked_add(hlen)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[20..body]).map_err(|e| Error::format(path, e.to_string()))?;
    let mut payload = bytes[body..].chunks_exact(8);
    if payload.len() != header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum::<usize>()
        || !payload.remainder().is_empty()
    {
        return Err(bad("payload size does not match the tensor index"));
    }
    let mut store = ParamStore::new();
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        let data = payload
            .by_ref()
            .take(numel)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
        store.set_frozen(&entry.name, entry.frozen)?;
    }
    let model = Model::from_params(header.model, store)?;
    Ok(Checkpoint {
        model,
        meta: header.meta,
    })
}

pub fn save(path: &Path, model: &Model, meta: &serde_json::Value) -> Result<()> {
    let bytes = encode(model, meta)?;
    // Write-then-rename so an interrupted save never clobbers the last good file.
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Lowercase hex SHA-256 of a file.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ambiguity::CovarianceMode;
    use crate::model::tests::tiny_config;

    #[test]
    fn round_trip_is_exact() {
        let mut cfg = tiny_config(Some(CovarianceMode::Full));
        cfg.ambiguity.as_mut().unwrap().freeze_offdiag = true;
        let model = Model::init(cfg, 4).unwrap();
        let meta = serde_json::json!({"step": 7});
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &model, &meta).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.model.params, model.params);
        assert_eq!(back.model.config(), model.config());
        assert_eq!(back.meta, meta);
        assert_eq!(file_hash(&path).unwrap().len(), 64);
    }

    #[test]
    fn corrupt_archives_rejected() {
        let model = Model::init(tiny_config(None), 4).unwrap();
        let bytes = encode(&model, &serde_json::Value::Null).unwrap();
        let p = Path::new("x.ckpt");
        assert!(decode(&bytes[..bytes.len() - 8], p).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode(&wrong, p).is_err());
        let mut version = bytes;
        version[8] = 9;
        assert!(decode(&version, p).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn config_mismatch_is_descriptive() {
        let model = Model::init(tiny_config(Some(CovarianceMode::AxisAligned)), 4).unwrap();
        let bytes = encode(&model, &serde_json::Value::Null).unwrap();
        // Swap the recorded config for one without ambiguity networks.
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[20..20 + hlen]).unwrap();
        header["model"]["ambiguity"] = serde_json::Value::Null;
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut forged = bytes[..12].to_vec();
        forged.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        forged.extend_from_slice(&new_header);
        forged.extend_from_slice(&bytes[20 + hlen..]);
        let err = decode(&forged, Path::new("x.ckpt")).unwrap_err();
        assert!(matches!(err, Error::CheckpointMismatch(_)), "{err}");
    }
}
