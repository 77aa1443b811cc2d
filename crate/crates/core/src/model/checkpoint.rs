//! Versioned JSON checkpoints: model configuration plus named parameter arrays.
//!
//! ```text
//! {
//!   "format": "east-checkpoint",
//!   "version": 1,
//!   "config": { ...ModelConfig... },
//!   "run_config": "key = value lines or null",
//!   "params": [ { "name": "...", "rows": R, "cols": C, "data": [row-major f64] }, ... ]
//! }
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

pub const FORMAT: &str = "east-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    run_config: Option<String>,
    params: Vec<ParamRecord>,
}

pub fn to_json(model: &Model, run_config: Option<&str>) -> Result<String> {
    let params = model
        .params()
        .iter()
        .map(|(name, v)| ParamRecord {
            name: name.to_string(),
            rows: v.nrows(),
            cols: v.ncols(),
            data: v.iter().copied().collect(),
        })
        .collect();
    let file = CheckpointFile {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config().clone(),
        run_config: run_config.map(str::to_string),
        params,
    };
    serde_json::to_string(&file).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Returns the model and the echoed run configuration, if any.
pub fn from_json(text: &str) -> Result<(Model, Option<String>)> {
    let file: CheckpointFile =
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
    if file.format != FORMAT {
        return Err(Error::Checkpoint(format!("unexpected format tag '{}'", file.format)));
    }
    if file.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", file.version)));
    }
    let mut model = Model::new(file.config)?;
    if file.params.len() != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, configuration implies {}",
            file.params.len(),
            model.params().len()
        )));
    }
    for rec in file.params {
        let id = model
            .params()
            .id(&rec.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{}'", rec.name)))?;
        let expected = model.params().get(id).dim();
        if expected != (rec.rows, rec.cols) || rec.data.len() != rec.rows * rec.cols {
            return Err(Error::Checkpoint(format!(
                "parameter '{}' has shape {}x{}, configuration implies {}x{}",
                rec.name, rec.rows, rec.cols, expected.0, expected.1
            )));
        }
        *model.params_mut().get_mut(id) = Array2::from_shape_vec((rec.rows, rec.cols), rec.data)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok((model, file.run_config))
}

pub fn save(model: &Model, run_config: Option<&str>, path: &Path) -> Result<()> {
    fs::write(path, to_json(model, run_config)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, Option<String>)> {
    from_json(&fs::read_to_string(path)?)
}
