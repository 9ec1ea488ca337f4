use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: u32 = 1;

const META: &str = "meta.json";
const PARAMS: &str = "params.safetensors";
const OPTIMIZER: &str = "optimizer.safetensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    /// Number of completed training steps.
    pub step: usize,
    pub seed: u64,
    /// sha256 of the canonical JSON of `config`.
    pub config_hash: String,
    pub config: serde_json::Value,
    /// Running reward baseline, if one has been formed.
    pub baseline: Option<f64>,
    pub optimizer_steps: usize,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: HashMap<String, Tensor>,
    /// Optimizer state, e.g. `m.<name>` and `v.<name>` moments.
    pub optimizer: HashMap<String, Tensor>,
}

fn fail(path: &Path, reason: impl ToString) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Writes `dir/meta.json` and the tensor files, replacing any previous
/// checkpoint in `dir`. The metadata is written last so a reader never sees
/// new metadata next to old tensors.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensors = |name: &str, map: &HashMap<String, Tensor>| -> Result<()> {
        let path = dir.join(name);
        let tmp = dir.join(format!("{name}.tmp"));
        candle_core::safetensors::save(map, &tmp).map_err(|e| fail(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    };
    tensors(PARAMS, &ckpt.params)?;
    tensors(OPTIMIZER, &ckpt.optimizer)?;
    let meta_path = dir.join(META);
    let tmp = dir.join(format!("{META}.tmp"));
    fs::write(&tmp, serde_json::to_vec_pretty(&ckpt.meta)?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &meta_path).map_err(|e| Error::io(&meta_path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta_path: PathBuf = dir.join(META);
    let raw = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_slice(&raw).map_err(|e| fail(&meta_path, e))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(fail(&meta_path, format!("unsupported format {}", meta.format)));
    }
    let load = |name: &str| -> Result<HashMap<String, Tensor>> {
        let path = dir.join(name);
        candle_core::safetensors::load(&path, &Device::Cpu).map_err(|e| fail(&path, e))
    };
    Ok(Checkpoint {
        meta,
        params: load(PARAMS)?,
        optimizer: load(OPTIMIZER)?,
    })
}
