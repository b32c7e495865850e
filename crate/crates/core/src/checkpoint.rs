//! Binary checkpoint container.
//!
//! Layout: 8-byte magic `PSCLAB01`, a little-endian `u32` header length, a
//! JSON header, then the raw little-endian tensor payload. The header maps
//! each tensor name to `{dtype, shape, offset, nbytes}` (offsets relative to
//! the payload start) and echoes the model configuration under `config`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"PSCLAB01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: Value,
    pub tensors: BTreeMap<String, TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_state: Option<Value>,
}

/// Decoded container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Value,
    pub tensors: BTreeMap<String, Tensor>,
    pub train_state: Option<Value>,
}

/// Serialises tensors in the given order as `f64`.
pub fn encode(config: &Value, tensors: &[(String, &Tensor)], train_state: Option<&Value>) -> Result<Vec<u8>> {
    let mut entries = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let nbytes = t.len() * 8;
        let entry = TensorEntry {
            dtype: DType::F64,
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
            nbytes: nbytes as u64,
        };
        if entries.insert(name.clone(), entry).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor name `{name}`")));
        }
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header { config: config.clone(), tensors: entries, train_state: train_state.cloned() };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("missing PSCLAB01 magic"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes")) as usize;
    let body = &bytes[12..];
    if hlen > body.len() {
        return Err(bad("header length exceeds file size"));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(format!("header does not parse: {e}")))?;
    let payload = &body[hlen..];

    let mut spans: Vec<(u64, u64, &str)> = Vec::new();
    let mut tensors = BTreeMap::new();
    for (name, e) in &header.tensors {
        let count: usize = e.shape.iter().product();
        if (count * e.dtype.width()) as u64 != e.nbytes {
            return Err(Error::Checkpoint(format!("tensor `{name}`: nbytes disagrees with shape")));
        }
        let end = e.offset.checked_add(e.nbytes).ok_or_else(|| bad("offset overflow"))?;
        if end > payload.len() as u64 {
            return Err(Error::Checkpoint(format!("tensor `{name}` runs past the payload")));
        }
        spans.push((e.offset, end, name));
        let raw = &payload[e.offset as usize..end as usize];
        let data: Vec<f64> = match e.dtype {
            DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            DType::F32 => {
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect()
            }
        };
        let t =
            Tensor::new(e.shape.clone(), data).map_err(|err| Error::Checkpoint(format!("tensor `{name}`: {err}")))?;
        tensors.insert(name.clone(), t);
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[0].1 > w[1].0 {
            return Err(Error::Checkpoint(format!("tensors `{}` and `{}` overlap", w[0].2, w[1].2)));
        }
    }
    let total: u64 = header.tensors.values().map(|e| e.nbytes).sum();
    if total != payload.len() as u64 {
        return Err(bad("payload length differs from the sum of tensor sizes"));
    }
    Ok(Checkpoint { config: header.config, tensors, train_state: header.train_state })
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(path: &Path, config: &Value, tensors: &[(String, &Tensor)], train_state: Option<&Value>) -> Result<()> {
    write_atomic(path, &encode(config, tensors, train_state)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}

/// Saves every model tensor plus optional extra tensors (optimiser moments).
pub fn save_model(
    path: &Path,
    state: &ModelState,
    extra: &[(String, &Tensor)],
    train_state: Option<&Value>,
) -> Result<()> {
    let mut tensors = state.weights.named();
    tensors.extend(extra.iter().map(|(n, t)| (n.clone(), *t)));
    save(path, &serde_json::to_value(&state.config)?, &tensors, train_state)
}

/// Rebuilds a model from a checkpoint; every model tensor must be present.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<ModelState> {
    let config: ModelConfig = serde_json::from_value(ckpt.config.clone())
        .map_err(|e| Error::Checkpoint(format!("config echo does not parse: {e}")))?;
    let mut state = ModelState::init(config, 0)?;
    for (name, slot) in state.weights.named_mut() {
        let t = ckpt.tensors.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
    }
    Ok(state)
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    model_from_checkpoint(&load(path)?)
}
