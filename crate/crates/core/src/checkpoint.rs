//! Checkpoint file: magic, header length, JSON header, then every
//! parameter as little-endian `f64` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{FeatureSet, FusionModel, ModelConfig, Stage};
use crate::params::ParamStore;
use crate::{CoreError, Result};

pub const MAGIC: &[u8; 8] = b"TTTOMCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    stage: Option<Stage>,
    config: ModelConfig,
    rna: FeatureSet,
    adt: FeatureSet,
    class_names: Vec<String>,
    params: Vec<ParamEntry>,
}

pub fn to_bytes(model: &FusionModel) -> Result<Vec<u8>> {
    let store = &model.store;
    let mut offset = 0u64;
    let params = store
        .ids()
        .map(|id| {
            let e = ParamEntry {
                name: store.name(id).to_owned(),
                shape: store.shape(id).dims().to_vec(),
                offset,
            };
            offset += 8 * store.value(id).len() as u64;
            e
        })
        .collect();
    let header = Header {
        format_version: FORMAT_VERSION,
        stage: model.stage,
        config: model.config.clone(),
        rna: model.rna.clone(),
        adt: model.adt.clone(),
        class_names: model.class_names.clone(),
        params,
    };
    let json = serde_json::to_vec(&header).map_err(|e| CoreError::Config(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for id in store.ids() {
        for v in store.value(id) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<FusionModel> {
    let bad = |m: String| CoreError::Format {
        path: path.to_owned(),
        message: m,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if hlen > body.len() {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("format version {} is not supported", header.format_version)));
    }
    let payload = &body[hlen..];
    let mut store = ParamStore::new();
    let mut expected = 0u64;
    for p in header.params {
        let n: usize = p.shape.iter().product();
        let start = p.offset as usize;
        if p.offset != expected || start + 8 * n > payload.len() {
            return Err(bad(format!("parameter {} lies outside the payload", p.name)));
        }
        let data = payload[start..start + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.add(p.name, &p.shape, data)?;
        expected += 8 * n as u64;
    }
    if expected as usize != payload.len() {
        return Err(bad("trailing bytes after the last parameter".into()));
    }
    FusionModel::from_parts(header.config, store, header.rna, header.adt, header.class_names, header.stage)
}

pub fn save(model: &FusionModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?).map_err(|e| CoreError::io(path, e))
}

pub fn load(path: &Path) -> Result<FusionModel> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    from_bytes(&bytes, path)
}
