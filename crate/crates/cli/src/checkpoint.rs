//! Binary checkpoint: `QTIP` | version u32 LE | header length u64 LE | JSON header | f32 LE payload.

use std::path::Path;

use qatip::corpus::{LengthCaps, TokenizeMode};
use qatip::model::ModelConfig;
use qatip::tensor::ParamStore;
use qatip::{Error, Model, Result, Tensor};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"QTIP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
    pub len: usize,
}

/// Everything needed to rebuild and use a model besides its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub model: ModelConfig,
    pub vocab_size: usize,
    pub tokenize: TokenizeMode,
    pub caps: LengthCaps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: Snapshot,
    manifest: Vec<ManifestEntry>,
}

fn corrupt(field: &str, detail: impl std::fmt::Display) -> Error {
    Error::Data(format!("corrupt checkpoint: {field}: {detail}"))
}

pub fn encode(snapshot: &Snapshot, params: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut manifest = Vec::with_capacity(params.len());
    let mut offset = 0;
    for p in params.iter() {
        let len = p.value.len();
        manifest.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            len,
        });
        offset += len;
    }
    let header = serde_json::to_vec(&Header {
        config: snapshot.clone(),
        manifest,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in params.iter() {
        for x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Snapshot, Model)> {
    if bytes.len() < 16 {
        return Err(corrupt("preamble", format!("file has {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("magic", format!("{:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt("version", format!("expected {VERSION}, found {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = 16usize
        .checked_add(usize::try_from(header_len).map_err(|_| corrupt("header length", header_len))?)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("header length", format!("{header_len} exceeds file size {}", bytes.len())))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end]).map_err(|e| corrupt("header", e))?;
    let payload = &bytes[header_end..];
    let total: usize = header.manifest.iter().map(|e| e.len).sum();
    if payload.len() != 4 * total {
        return Err(corrupt("payload", format!("expected {} bytes, found {}", 4 * total, payload.len())));
    }
    let mut model = Model::new(&header.config.model, header.config.vocab_size, 0)?;
    let store = model.params_mut();
    if store.len() != header.manifest.len() {
        return Err(corrupt(
            "manifest",
            format!("{} entries for a model with {} parameters", header.manifest.len(), store.len()),
        ));
    }
    let mut expected_offset = 0;
    for (id, entry) in store.ids().collect::<Vec<_>>().into_iter().zip(&header.manifest) {
        let p = store.get(id);
        if p.name != entry.name {
            return Err(corrupt("manifest", format!("expected parameter {}, found {}", p.name, entry.name)));
        }
        if p.value.shape() != entry.shape.as_slice() || entry.len != p.value.len() || entry.offset != expected_offset {
            return Err(corrupt("manifest", format!("bad shape or extent for {}", entry.name)));
        }
        let data: Vec<f32> = payload[4 * entry.offset..4 * (entry.offset + entry.len)]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        store.set_value(id, Tensor::new(entry.shape.clone(), data)?)?;
        expected_offset += entry.len;
    }
    Ok((header.config, model))
}

pub fn save(path: impl AsRef<Path>, snapshot: &Snapshot, params: &ParamStore<f32>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(snapshot, params)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Snapshot, Model)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}
