//! A checkpoint is the parameter archive plus a JSON sidecar describing how
//! to rebuild the model and its input pipeline.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Preprocessor;
use crate::error::{io_err, Result};
use crate::model::{Model, ModelSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub preprocessor: Preprocessor,
    pub class_names: Vec<String>,
}

pub fn meta_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    model.save(path)?;
    let side = meta_path(path);
    fs::write(&side, serde_json::to_string_pretty(meta)?).map_err(io_err(&side))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, CheckpointMeta)> {
    let path = path.as_ref();
    let side = meta_path(path);
    let meta: CheckpointMeta =
        serde_json::from_str(&fs::read_to_string(&side).map_err(io_err(&side))?)?;
    let model = Model::load(meta.spec.clone(), path)?;
    Ok((model, meta))
}
