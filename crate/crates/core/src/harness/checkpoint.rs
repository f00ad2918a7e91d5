//! Single-file checkpoints: a JSON manifest whose tensors are base64-encoded
//! little-endian `f64` arrays, sealed with a SHA-256 checksum of the manifest body.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::seeded;

use super::config::TrainConfig;
use super::model::{Model, Progress};

pub const FORMAT: &str = "dmin-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct Body {
    format: String,
    version: u32,
    config: TrainConfig,
    base_classes: usize,
    progress: Progress,
    tensors: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    #[serde(flatten)]
    body: Body,
    checksum: String,
}

fn checksum(body: &Body) -> String {
    let bytes = serde_json::to_vec(body).expect("manifest serialises");
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode_f64s(name: &str, text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Corrupt(format!("tensor `{name}`: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Corrupt(format!(
            "tensor `{name}`: {} bytes is not a whole number of f64",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Serialises `model` to the checkpoint text.
pub fn to_string(model: &Model) -> String {
    let body = Body {
        format: FORMAT.to_string(),
        version: VERSION,
        config: model.config.clone(),
        base_classes: model.classifier.base_classes(),
        progress: model.progress,
        tensors: model
            .named_tensors()
            .into_iter()
            .map(|(name, t)| TensorRecord {
                name,
                shape: t.shape().to_vec(),
                data: encode_f64s(t.data()),
            })
            .collect(),
    };
    let manifest = Manifest {
        checksum: checksum(&body),
        body,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    text.push('\n');
    text
}

/// Parses checkpoint text, verifying format, version, checksum and shapes.
pub fn from_str(text: &str) -> Result<Model> {
    let raw: Value = serde_json::from_str(text)
        .map_err(|e| Error::Corrupt(format!("unreadable manifest: {e}")))?;
    if raw.get("format").and_then(Value::as_str) != Some(FORMAT) {
        return Err(Error::Corrupt(format!("not a {FORMAT} file")));
    }
    let version = raw
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Corrupt("missing version".into()))?;
    if version != u64::from(VERSION) {
        return Err(Error::Version {
            expected: VERSION,
            found: u32::try_from(version).unwrap_or(u32::MAX),
        });
    }
    let manifest: Manifest = serde_json::from_value(raw)
        .map_err(|e| Error::Corrupt(format!("malformed manifest: {e}")))?;
    if checksum(&manifest.body) != manifest.checksum {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }
    let body = manifest.body;
    body.config.validate()?;
    // A skeleton with the configured shapes; every tensor is then overwritten.
    let mut model = Model::init(&body.config, body.base_classes, &mut seeded(0))?;
    let expected: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    let found: Vec<&str> = body.tensors.iter().map(|t| t.name.as_str()).collect();
    if expected != found {
        return Err(Error::Corrupt(format!(
            "tensor list {found:?} does not match the configuration ({expected:?})"
        )));
    }
    for record in body.tensors {
        let data = decode_f64s(&record.name, &record.data)?;
        let tensor = Tensor::new(record.shape, data)
            .map_err(|e| Error::Corrupt(format!("tensor `{}`: {e}", record.name)))?;
        model.set_tensor(&record.name, tensor)?;
    }
    model.progress = body.progress;
    model.check()?;
    Ok(model)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_string(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    from_str(&std::fs::read_to_string(path)?)
}
