//! Model checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header,
//! then the flat parameter vector as little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DescriptorModel, ModelSpec, Segment};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"APLDESC1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: ModelSpec,
    pub seed: u64,
    pub param_count: usize,
    pub segments: Vec<Segment>,
    /// Echo of the run configuration that produced the parameters.
    pub config: serde_json::Value,
}

pub fn to_bytes(model: &DescriptorModel, config: &serde_json::Value) -> Vec<u8> {
    let header = CheckpointHeader {
        spec: *model.spec(),
        seed: model.seed(),
        param_count: model.params().len(),
        segments: model.segments().to_vec(),
        config: config.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * model.params().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<(DescriptorModel, CheckpointHeader)> {
    let bad = |offset: usize, msg: &str| Error::format(origin, Some(offset as u64), msg);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad(0, "not a descriptor checkpoint"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| bad(8, "truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(16, &format!("bad header: {e}")))?;
    let start = 16 + len;
    let data = &bytes[start..];
    if data.len() != header.param_count * 8 {
        return Err(bad(start, &format!("expected {} parameters, found {} bytes", header.param_count, data.len())));
    }
    let params: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let mut model = DescriptorModel::zeroed(header.spec, header.seed)?;
    if model.params().len() != params.len() || model.segments() != header.segments.as_slice() {
        return Err(bad(16, "parameter layout does not match the model spec"));
    }
    model.set_params(&params)?;
    Ok((model, header))
}

pub fn save(model: &DescriptorModel, config: &serde_json::Value, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(model, config)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(DescriptorModel, CheckpointHeader)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
