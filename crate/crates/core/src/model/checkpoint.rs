//! Checkpoint container: a JSON header (config, vocabulary hash, stage tag,
//! step count, seed) plus named parameter tensors. Loading verifies tensor
//! shapes and, when requested, the vocabulary hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::Params;
use super::{Model, ModelConfig, ModelError};

/// Which training stage produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Pretrained,
    VanillaFt,
    Kreplay,
}

impl std::fmt::Display for StageTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StageTag::Pretrained => "pretrained",
            StageTag::VanillaFt => "vanilla_ft",
            StageTag::Kreplay => "kreplay",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub stage: StageTag,
    pub step: usize,
    pub seed: u64,
    pub param_checksum: String,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    header: CheckpointHeader,
    tensors: BTreeMap<String, TensorRecord>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model<f32>,
    header: &CheckpointHeader,
) -> Result<(), ModelError> {
    let (slices, meta) = model.params.named_slices();
    let mut tensors = BTreeMap::new();
    for (slice, (name, shape)) in slices.into_iter().zip(meta) {
        tensors.insert(name, TensorRecord { shape, data: slice.to_vec() });
    }
    let file = CheckpointFile { header: header.clone(), tensors };
    let json = serde_json::to_string(&file).expect("serializable checkpoint");
    fs::write(path, json)
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
}

/// Loads a checkpoint. When `expected_vocab_hash` is given, the stored hash
/// must match it.
pub fn load_checkpoint(
    path: &Path,
    expected_vocab_hash: Option<&str>,
) -> Result<(Model<f32>, CheckpointHeader), ModelError> {
    let raw = fs::read_to_string(path)
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    let file: CheckpointFile = serde_json::from_str(&raw)
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    if let Some(expected) = expected_vocab_hash {
        if file.header.vocab_hash != expected {
            return Err(ModelError::VocabHashMismatch {
                found: file.header.vocab_hash,
                expected: expected.to_string(),
            });
        }
    }
    file.header.config.validate()?;

    let mut model = Model::<f32>::init(&file.header.config)?;
    load_tensors(&mut model.params, &file.tensors, path)?;
    if model.checksum() != file.header.param_checksum {
        return Err(ModelError::Checkpoint(format!(
            "{}: parameter checksum mismatch",
            path.display()
        )));
    }
    Ok((model, file.header))
}

fn load_tensors(
    params: &mut Params<f32>,
    tensors: &BTreeMap<String, TensorRecord>,
    path: &Path,
) -> Result<(), ModelError> {
    let (slices, meta) = params.named_slices_mut();
    if tensors.len() != meta.len() {
        return Err(ModelError::Checkpoint(format!(
            "{}: expected {} tensors, found {}",
            path.display(),
            meta.len(),
            tensors.len()
        )));
    }
    for (slice, (name, len, shape)) in slices.into_iter().zip(meta) {
        let rec = tensors.get(&name).ok_or_else(|| {
            ModelError::Checkpoint(format!("{}: missing tensor `{name}`", path.display()))
        })?;
        if rec.shape != shape || rec.data.len() != len {
            return Err(ModelError::Checkpoint(format!(
                "{}: tensor `{name}` has shape {:?}, expected {:?}",
                path.display(),
                rec.shape,
                shape
            )));
        }
        slice.copy_from_slice(&rec.data);
    }
    Ok(())
}
