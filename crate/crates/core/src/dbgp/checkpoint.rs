//! JSON checkpoints of a model state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::ModelState;
use crate::error::{Error, Result};

const FORMAT: &str = "dbgp-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    state: ModelState,
}

pub fn checkpoint_to_string(state: &ModelState) -> Result<String> {
    let env = Envelope {
        format: FORMAT.into(),
        version: VERSION,
        state: state.clone(),
    };
    serde_json::to_string(&env).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn checkpoint_from_str(text: &str) -> Result<ModelState> {
    let env: Envelope = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if env.format != FORMAT || env.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            env.format, env.version
        )));
    }
    env.state.config.validate()?;
    env.state.check_blocks()?;
    Ok(env.state)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let text = checkpoint_to_string(state)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text)
}
