//! Checkpoints on disk: one tensor file per parameter plus `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::Value;

use super::Parameterized;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";

/// Writes every parameter of `models` under `dir`. `meta` is stored in the
/// manifest alongside the parameter list.
pub fn save_checkpoint(dir: &Path, models: &[&dyn Parameterized], meta: Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for model in models {
        for (name, data) in model.named_params() {
            Tensor::from_f64(vec![data.len()], data)?.save(&dir.join(format!("{name}.bin")))?;
            names.push(Value::String(name));
        }
    }
    let manifest = serde_json::json!({
        "format": "lofi-checkpoint/1",
        "params": names,
        "meta": meta,
    });
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("json value serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub struct Checkpoint {
    pub meta: Value,
    pub params: BTreeMap<String, Vec<f64>>,
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::DatasetMissing(path));
    }
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Value = serde_json::from_slice(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        offset: 0,
        message: e.to_string(),
    })?;
    let names = manifest["params"]
        .as_array()
        .ok_or_else(|| Error::Config(format!("{}: missing parameter list", path.display())))?;
    let mut params = BTreeMap::new();
    for name in names {
        let name = name
            .as_str()
            .ok_or_else(|| Error::Config(format!("{}: parameter names must be strings", path.display())))?;
        let t = Tensor::load(&dir.join(format!("{name}.bin")))?;
        params.insert(name.to_string(), t.data.iter().map(|&v| f64::from(v)).collect());
    }
    Ok(Checkpoint {
        meta: manifest["meta"].clone(),
        params,
    })
}

impl Checkpoint {
    /// Copies stored values into `model`. Every parameter of the model must be present.
    pub fn restore(&self, model: &mut dyn Parameterized) -> Result<()> {
        for (name, slot) in model.named_params_mut() {
            let stored = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint has no parameter {name}")))?;
            if stored.len() != slot.len() {
                return Err(Error::Shape(format!(
                    "parameter {name}: checkpoint has {} values, model expects {}",
                    stored.len(),
                    slot.len()
                )));
            }
            slot.copy_from_slice(stored);
        }
        Ok(())
    }
}

/// Rounds every parameter through f32 so in-memory state matches what a
/// checkpoint would hold.
pub fn quantize(model: &mut dyn Parameterized) {
    for (_, p) in model.named_params_mut() {
        for v in p {
            *v = f64::from(*v as f32);
        }
    }
}
