//! Self-describing checkpoint container: a JSON manifest (config, expert
//! spec, vocabulary, schema fingerprint, tensor index, training state)
//! followed by raw little-endian f32 tensor data.
//!
//! Layout, version 1:
//!
//! ```text
//! "TBCK" | version: u32 LE | manifest_len: u64 LE | manifest JSON | tensors
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_base_lm, tabbify, ModelConfig, ModelError, MoeSpec, TabbyModel};
use crate::codec::Vocabulary;

const MAGIC: &[u8; 4] = b"TBCK";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint was trained against schema {found}, expected {expected}")]
    SchemaMismatch { expected: String, found: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A trained model together with everything needed to sample from it.
pub struct Checkpoint {
    pub model: TabbyModel<f32>,
    pub vocab: Vocabulary,
    pub schema_fingerprint: String,
    pub step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub moe: Option<MoeSpec>,
    pub vocab: Vec<String>,
    pub schema_fingerprint: String,
    pub step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: [u64; 2],
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    ckpt.model.visit_params(&mut |name, p| {
        let offset = payload.len() as u64;
        for &x in p.values() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape: p.shape(),
            offset,
            len: p.len() as u64,
        });
    });
    let manifest = CheckpointManifest {
        config: *ckpt.model.config(),
        moe: ckpt.model.moe().cloned(),
        vocab: ckpt.vocab.token_strings().to_vec(),
        schema_fingerprint: ckpt.schema_fingerprint.clone(),
        step: ckpt.step,
        rng_seed: ckpt.rng_seed,
        rng_word_pos: [
            (ckpt.rng_word_pos >> 64) as u64,
            ckpt.rng_word_pos as u64,
        ],
        tensors,
    };
    let manifest_json =
        serde_json::to_vec(&manifest).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;

    let mut out = Vec::with_capacity(16 + manifest_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    out.extend_from_slice(&payload);
    fs::write(path, out)?;
    Ok(())
}

/// Reads just the manifest, without reconstructing the model.
pub fn read_manifest(path: &Path) -> Result<CheckpointManifest, CheckpointError> {
    let bytes = fs::read(path)?;
    let (manifest, _) = split_file(&bytes)?;
    Ok(manifest)
}

fn split_file(bytes: &[u8]) -> Result<(CheckpointManifest, &[u8]), CheckpointError> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let manifest_end = 16usize
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CheckpointError::Corrupt("manifest length out of bounds".into()))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[16..manifest_end])
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    Ok((manifest, &bytes[manifest_end..]))
}

/// Loads a checkpoint, refusing when `expected_fingerprint` is given and does
/// not match the one stored at save time.
pub fn load_checkpoint(
    path: &Path,
    expected_fingerprint: Option<&str>,
) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path)?;
    let (manifest, payload) = split_file(&bytes)?;

    if let Some(expected) = expected_fingerprint {
        if manifest.schema_fingerprint != expected {
            return Err(CheckpointError::SchemaMismatch {
                expected: expected.to_string(),
                found: manifest.schema_fingerprint,
            });
        }
    }

    let vocab = Vocabulary::try_from(manifest.vocab.clone()).map_err(CheckpointError::Corrupt)?;
    let mut model = build_base_lm::<f32>(manifest.config)?;
    if let Some(spec) = &manifest.moe {
        model = tabbify(model, spec.clone())?;
    }

    let index: std::collections::HashMap<&str, &TensorEntry> = manifest
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t))
        .collect();
    let mut missing = Vec::new();
    let mut err: Option<CheckpointError> = None;
    let mut consumed = 0usize;
    model.visit_params_mut(&mut |name, mut p| {
        if err.is_some() {
            return;
        }
        let Some(entry) = index.get(name.as_str()) else {
            missing.push(name);
            return;
        };
        if entry.shape != p.shape() {
            err = Some(CheckpointError::Corrupt(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                entry.shape,
                p.shape()
            )));
            return;
        }
        let start = entry.offset as usize;
        let nbytes = entry.len as usize * 4;
        let Some(chunk) = payload.get(start..start + nbytes) else {
            err = Some(CheckpointError::Corrupt(format!(
                "tensor {name} data out of bounds"
            )));
            return;
        };
        for (dst, src) in p.values_mut().iter_mut().zip(chunk.chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().unwrap());
        }
        consumed += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if !missing.is_empty() {
        return Err(CheckpointError::Corrupt(format!(
            "missing tensors: {missing:?}"
        )));
    }
    if consumed != manifest.tensors.len() {
        return Err(CheckpointError::Corrupt(
            "checkpoint contains tensors the model does not use".into(),
        ));
    }

    Ok(Checkpoint {
        model,
        vocab,
        schema_fingerprint: manifest.schema_fingerprint,
        step: manifest.step,
        rng_seed: manifest.rng_seed,
        rng_word_pos: ((manifest.rng_word_pos[0] as u128) << 64)
            | manifest.rng_word_pos[1] as u128,
    })
}
