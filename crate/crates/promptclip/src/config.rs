//! Flat JSON run configuration: defaults, then a config file, then flags.

use std::path::Path;

use promptclip_core::optim::TrainConfig;
use promptclip_core::ModelConfig;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{io_at, Error, Result};

/// The merged configuration and its flat JSON form.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub flat: Map<String, Value>,
}

fn object(v: impl Serialize) -> Map<String, Value> {
    match serde_json::to_value(v) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("config structs serialize to objects"),
    }
}

/// Every known key with its default value.
pub fn defaults() -> Map<String, Value> {
    let mut m = object(ModelConfig::default());
    m.extend(object(TrainConfig::default()));
    m
}

fn apply(base: &mut Map<String, Value>, layer: Map<String, Value>, source: &str) -> Result<()> {
    for (k, v) in layer {
        if !base.contains_key(&k) {
            return Err(Error::Usage(format!("unknown config key {k:?} in {source}")));
        }
        base.insert(k, v);
    }
    Ok(())
}

/// Merge `defaults < file < overrides` and validate the result.
pub fn resolve(file: Option<&Path>, overrides: Map<String, Value>) -> Result<ResolvedConfig> {
    let mut flat = defaults();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(io_at(path))?;
        let layer = match serde_json::from_str(&text) {
            Ok(Value::Object(m)) => m,
            Ok(_) => return Err(Error::Usage(format!("{} must hold a JSON object", path.display()))),
            Err(e) => return Err(Error::Parse { path: path.to_path_buf(), line: e.line(), msg: e.to_string() }),
        };
        apply(&mut flat, layer, &path.display().to_string())?;
    }
    apply(&mut flat, overrides, "flags")?;
    let value = Value::Object(flat.clone());
    let bad = |e: serde_json::Error| Error::Usage(format!("invalid config value: {e}"));
    let model: ModelConfig = serde_json::from_value(value.clone()).map_err(bad)?;
    let train: TrainConfig = serde_json::from_value(value).map_err(bad)?;
    model.validate()?;
    train.validate()?;
    Ok(ResolvedConfig { model, train, flat })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn later_layers_win_and_unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"epochs": 7, "width": 64, "fusion_heads": 2}"#).unwrap();
        let mut flags = Map::new();
        flags.insert("epochs".into(), json!(3));
        let r = resolve(Some(&file), flags).unwrap();
        assert_eq!(r.train.epochs, 3);
        assert_eq!(r.model.encoder.width, 64);
        assert_eq!(r.train.base_lr, 1e-2);
        let mut flags = Map::new();
        flags.insert("epochz".into(), json!(3));
        assert!(matches!(resolve(None, flags), Err(Error::Usage(_))));
    }

    #[test]
    fn defaults_cover_both_structs() {
        let d = defaults();
        for k in ["batch_size", "trainable_blocks", "fusion_depth", "init_seed", "warmup_steps", "patch_size"] {
            assert!(d.contains_key(k), "{k}");
        }
    }
}
