//! Checkpoint files: magic, header length, JSON header, then one f32 blob.
//!
//! ```text
//! "RACKPT01"          8 bytes
//! header_len          u64 little-endian
//! header              header_len bytes of UTF-8 JSON (CheckpointHeader)
//! blob                little-endian f32, tensors back to back in manifest order
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{ParamKind, ViTConfig, ViTParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RACKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    /// Offset into the blob, in bytes.
    pub offset: usize,
    /// Length in bytes.
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ViTConfig,
    pub seed: u64,
    pub step: usize,
    pub params: Vec<ManifestEntry>,
}

pub fn checkpoint_bytes(params: &ViTParams<f32>, config: &ViTConfig, seed: u64, step: usize) -> Result<Vec<u8>> {
    params.check(config)?;
    let mut manifest = Vec::new();
    let mut blob = Vec::with_capacity(params.num_params() * 4);
    for (name, kind, t) in params.named() {
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        manifest.push(ManifestEntry {
            name,
            kind,
            shape: t.shape().to_vec(),
            offset,
            bytes: blob.len() - offset,
        });
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        config: config.clone(),
        seed,
        step,
        params: manifest,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + blob.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn save_checkpoint(path: &Path, params: &ViTParams<f32>, config: &ViTConfig, seed: u64, step: usize) -> Result<()> {
    let bytes = checkpoint_bytes(params, config, seed, step)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, ViTParams<f32>)> {
    let bad = |m: String| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing RACKPT01 magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let blob_start = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(format!("header length {len} exceeds file size")))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..blob_start])?;
    let blob = &bytes[blob_start..];
    let mut params = ViTParams::<f32>::init(&header.config, 0)?;
    {
        let slots = params.named_mut();
        if slots.len() != header.params.len() {
            return Err(bad(format!(
                "manifest lists {} tensors, config implies {}",
                header.params.len(),
                slots.len()
            )));
        }
        for ((name, _, t), entry) in slots.into_iter().zip(&header.params) {
            if name != entry.name || t.shape() != entry.shape.as_slice() || entry.bytes != t.len() * 4 {
                return Err(bad(format!(
                    "manifest entry {} does not match parameter {name}",
                    entry.name
                )));
            }
            let raw = blob
                .get(entry.offset..entry.offset + entry.bytes)
                .ok_or_else(|| bad(format!("tensor {} runs past the end of the blob", entry.name)))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            *t = Tensor::new(entry.shape.clone(), values)?;
        }
    }
    Ok((header, params))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ViTParams<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}
