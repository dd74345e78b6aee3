//! Checkpoint file: `{"config": RunConfig, "params": [{name, shape, data}]}`.

use std::path::Path;

use anyhow::{Context, Result};
use serde_json::Value;

use focalcomm::model::Model;
use focalcomm::RunConfig;

pub fn save(model: &Model, cfg: &RunConfig) -> Result<String> {
    let mut doc: Value = serde_json::from_str(&model.store.to_json()?)?;
    doc["config"] = serde_json::to_value(cfg)?;
    Ok(serde_json::to_string(&doc)?)
}

/// The stored run configuration and the raw document for [`restore`].
pub fn read(path: &Path) -> Result<(RunConfig, String)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut doc: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let cfg = serde_json::from_value(doc["config"].take())
        .with_context(|| format!("{} has no valid run configuration", path.display()))?;
    Ok((cfg, text))
}

/// Builds the model `cfg` describes and loads every parameter it needs.
/// Entries the model does not use are ignored; missing or mis-shaped ones
/// are rejected.
pub fn restore(cfg: &RunConfig, text: &str) -> Result<Model> {
    let mut model = Model::new(&cfg.model, cfg.seed)?;
    model.store.load_json(text)?;
    Ok(model)
}
