//! Model persistence: a magic tag, a little-endian format version, a JSON index and a blob of
//! little-endian f64 parameter values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::branches::{BranchArchitecture, BranchConfig};
use crate::error::{Error, Result};
use crate::train::{MultiExitModel, TaskKind};
use crate::vit::ViTConfig;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"MEVT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub strategy: Option<String>,
    pub seed: u64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Index {
    config: ViTConfig,
    task: TaskKind,
    model_seed: u64,
    backbone_trained: bool,
    branch_config: BranchConfig,
    branches: Vec<(usize, BranchArchitecture)>,
    tensors: Vec<TensorEntry>,
    metadata: TrainingMetadata,
}

/// A loaded model together with the metadata stored next to it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub model: MultiExitModel,
    pub metadata: TrainingMetadata,
}

pub fn checkpoint_bytes(model: &MultiExitModel, metadata: &TrainingMetadata) -> Result<Vec<u8>> {
    let store = &model.store;
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0;
    for id in store.ids() {
        let t = store.get(id);
        tensors.push(TensorEntry {
            name: store.name(id).to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let index = Index {
        config: model.config().clone(),
        task: model.task,
        model_seed: model.seed,
        backbone_trained: model.backbone_trained,
        branch_config: model.branch_config.clone(),
        branches: model.branch_keys(),
        tensors,
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&index)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for id in store.ids() {
        for v in store.get(id).values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &MultiExitModel, metadata: &TrainingMetadata) -> Result<()> {
    fs::write(path, checkpoint_bytes(model, metadata)?)?;
    Ok(())
}

/// Loads a checkpoint; with `expected` set, a differing stored backbone config is an error.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ViTConfig>) -> Result<Checkpoint> {
    parse_checkpoint(&fs::read(path)?, expected)
}

pub fn parse_checkpoint(bytes: &[u8], expected: Option<&ViTConfig>) -> Result<Checkpoint> {
    let corrupt = |msg: &str| Error::CorruptCheckpoint(msg.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes
        .get(16..16usize.saturating_add(json_len))
        .ok_or_else(|| corrupt("index extends past end of file"))?;
    let index: Index = serde_json::from_slice(json)?;
    if expected.is_some_and(|c| *c != index.config) {
        return Err(Error::ConfigMismatch);
    }
    let blob = &bytes[16 + json_len..];
    if !blob.len().is_multiple_of(8) {
        return Err(corrupt("parameter blob is not a whole number of f64 values"));
    }
    let values: Vec<f64> = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();

    let mut model = MultiExitModel::new(index.config.clone(), index.task, index.model_seed)?;
    model.branch_config = index.branch_config.clone();
    for &(location, arch) in &index.branches {
        model.add_branch(location, arch)?;
    }
    model.backbone_trained = index.backbone_trained;
    if model.store.len() != index.tensors.len() {
        return Err(corrupt("tensor count differs from the architecture"));
    }
    let ids: Vec<_> = model.store.ids().collect();
    let mut expected_offset = 0;
    for (id, entry) in ids.into_iter().zip(&index.tensors) {
        let t = model.store.get_mut(id);
        if entry.shape != t.shape() || entry.offset != expected_offset {
            return Err(corrupt(&format!("entry {} does not match the architecture", entry.name)));
        }
        let n = t.len();
        let src = values
            .get(entry.offset..entry.offset + n)
            .ok_or_else(|| corrupt("parameter blob is truncated"))?;
        t.values_mut().copy_from_slice(src);
        expected_offset += n;
    }
    for (id, entry) in model.store.ids().zip(&index.tensors) {
        if model.store.name(id) != entry.name {
            return Err(corrupt(&format!("entry {} does not match the architecture", entry.name)));
        }
    }
    if expected_offset != values.len() {
        return Err(corrupt("trailing parameter values"));
    }
    Ok(Checkpoint {
        version,
        model,
        metadata: index.metadata,
    })
}
