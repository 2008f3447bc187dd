//! Dataset container: magic, little-endian `u64` header length, JSON header
//! with the group, sequence and record tables, then the raw 8-bit pixels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GroupInfo, PatchDataset, PatchRecord, SequenceInfo};
use crate::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 8] = b"APLPATCH";

#[derive(Serialize, Deserialize)]
struct Header {
    side: usize,
    sequences: Vec<SequenceInfo>,
    groups: Vec<GroupInfo>,
    records: Vec<PatchRecord>,
}

pub fn write_container(ds: &PatchDataset, path: &Path) -> Result<()> {
    let header = Header {
        side: ds.side,
        sequences: ds.sequences.clone(),
        groups: ds.groups.clone(),
        records: ds.records.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + ds.pixels.len());
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&ds.pixels);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<PatchDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |offset: usize, msg: String| Error::format(path, Some(offset as u64), msg);
    if bytes.len() < 16 || &bytes[..8] != CONTAINER_MAGIC {
        return Err(bad(0, "not a patch container".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| bad(8, "truncated header".into()))?;
    let h: Header = serde_json::from_slice(body).map_err(|e| bad(16, format!("bad header: {e}")))?;
    let pixels = bytes[16 + len..].to_vec();
    if pixels.len() != h.records.len() * h.side * h.side {
        return Err(bad(16 + len, format!("pixel block holds {} bytes, expected {}", pixels.len(), h.records.len() * h.side * h.side)));
    }
    PatchDataset::new(h.side, pixels, h.records, h.groups, h.sequences)
}
