//! Binary checkpoint container.
//!
//! Layout: `b"GLMC"`, `u32` LE version, `u32` LE header length, a JSON
//! header, then every parameter as little-endian `f32` in manifest order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Arch, FfnnConfig, FfnnModel, LanguageModel, LstmConfig, LstmModel, Network};
use crate::autodiff::Tensor;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GLMC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const DEFAULT_INIT: &str = "uniform(-0.1,0.1);forget_bias=1;bias=0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epoch: usize,
    pub valid_perplexity: Option<f64>,
    pub seed: u64,
    pub init: String,
}

impl Default for TrainingMetadata {
    fn default() -> Self {
        Self {
            epoch: 0,
            valid_perplexity: None,
            seed: 0,
            init: DEFAULT_INIT.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
    /// Byte offset into the blob section.
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: Arch,
    config: serde_json::Value,
    vocab: Vocabulary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    output_vocab: Option<Vocabulary>,
    params: Vec<ManifestEntry>,
    metadata: TrainingMetadata,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: LanguageModel,
    pub metadata: TrainingMetadata,
}

pub fn checkpoint_to_bytes(model: &LanguageModel, metadata: &TrainingMetadata) -> Vec<u8> {
    let mut offset = 0u64;
    let params = model
        .params()
        .iter()
        .map(|p| {
            let e = ManifestEntry {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                trainable: p.trainable,
                offset,
            };
            offset += 4 * p.value.len() as u64;
            e
        })
        .collect();
    let header = Header {
        arch: model.arch(),
        config: model.config_json(),
        vocab: model.input_vocab().clone(),
        output_vocab: model.is_substituted().then(|| model.output_vocab().clone()),
        params,
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params().iter() {
        for x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Corruption("checkpoint truncated in preamble".into()))
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(bytes, 4)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = read_u32(bytes, 8)? as usize;
    let hbytes = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| Error::Corruption("checkpoint truncated in header".into()))?;
    let header: Header =
        serde_json::from_slice(hbytes).map_err(|e| Error::Corruption(format!("checkpoint header: {e}")))?;
    let blobs = &bytes[12 + hlen..];

    let corrupt = |msg: String| Error::Corruption(msg);
    let mut network = match header.arch {
        Arch::Lstm => {
            let cfg: LstmConfig =
                serde_json::from_value(header.config).map_err(|e| corrupt(format!("lstm config: {e}")))?;
            Network::Lstm(LstmModel::new(cfg, 0)?)
        }
        Arch::Ffnn => {
            let cfg: FfnnConfig =
                serde_json::from_value(header.config).map_err(|e| corrupt(format!("ffnn config: {e}")))?;
            Network::Ffnn(FfnnModel::new(cfg, 0)?)
        }
    };
    let store = match &mut network {
        Network::Lstm(m) => m.params_mut(),
        Network::Ffnn(m) => m.params_mut(),
    };
    if store.len() != header.params.len() {
        return Err(corrupt(format!(
            "manifest lists {} tensors, architecture has {}",
            header.params.len(),
            store.len()
        )));
    }
    let mut expected_offset = 0u64;
    for (p, e) in store.iter_mut().zip(&header.params) {
        if p.name != e.name || p.value.shape() != (e.rows, e.cols) || e.offset != expected_offset {
            return Err(corrupt(format!(
                "manifest entry {} {}x{} does not match {} {:?}",
                e.name,
                e.rows,
                e.cols,
                p.name,
                p.value.shape()
            )));
        }
        let n = e.rows * e.cols;
        let start = e.offset as usize;
        let raw = blobs
            .get(start..start + 4 * n)
            .ok_or_else(|| corrupt(format!("checkpoint truncated in tensor {}", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        p.value = Tensor::from_vec(e.rows, e.cols, data)?;
        p.trainable = e.trainable;
        expected_offset += 4 * n as u64;
    }
    if blobs.len() as u64 != expected_offset {
        return Err(corrupt(format!(
            "{} trailing bytes after tensors",
            blobs.len() as u64 - expected_offset.min(blobs.len() as u64)
        )));
    }
    let output_vocab = header.output_vocab.unwrap_or_else(|| header.vocab.clone());
    let model =
        LanguageModel::from_parts(network, header.vocab, output_vocab).map_err(|e| corrupt(e.to_string()))?;
    Ok(Checkpoint {
        model,
        metadata: header.metadata,
    })
}

/// Writes through a temporary sibling and renames, so an interrupted save
/// leaves any previous checkpoint at `path` intact.
pub fn save_checkpoint(model: &LanguageModel, metadata: &TrainingMetadata, path: &Path) -> Result<()> {
    let bytes = checkpoint_to_bytes(model, metadata);
    let mut tmp = PathBuf::from(path);
    tmp.as_mut_os_string().push(".tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
