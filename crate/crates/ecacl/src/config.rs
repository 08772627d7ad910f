//! Run configuration files: one JSON document, every field optional,
//! unknown keys rejected.

use std::fs;
use std::path::Path;

use ecacl_core::train::TrainConfig;

use crate::error::{Error, Result};

pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let config: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Pretty JSON with every field spelled out.
pub fn to_json(config: &TrainConfig) -> String {
    serde_json::to_string_pretty(config).expect("configs always serialize")
}
