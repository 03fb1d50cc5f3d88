//! `key = value` configuration files, applied over the defaults before any
//! command-line flag.
//!
//! Keys are dotted paths into the training configuration (`steps`,
//! `optimizer.lr`, `vit.depth`, ...). Values are read as JSON when they
//! parse as such and as bare strings otherwise, so `method = erm` works.

use std::path::Path;

use hcvp::trainer::TrainConfig;
use hcvp::{Error, Result};
use serde_json::Value;

pub fn parse(text: &str, path: &Path) -> Result<Vec<(String, Value)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::format(path, format!("line {}: expected key = value", i + 1)));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::format(path, format!("line {}: empty key", i + 1)));
        }
        let value = value.trim();
        let v = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        out.push((key.to_string(), v));
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Vec<(String, Value)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path)
}

/// Applies `pairs` to `base`. Unknown keys and ill-typed values are
/// configuration errors.
pub fn apply(base: &TrainConfig, pairs: &[(String, Value)]) -> Result<TrainConfig> {
    let mut tree = serde_json::to_value(base).expect("config serializes");
    for (key, value) in pairs {
        let mut node = &mut tree;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown configuration key `{key}`")))?;
        }
        if node.is_object() {
            return Err(Error::Config(format!("`{key}` is a section, not a value")));
        }
        *node = value.clone();
    }
    serde_json::from_value(tree).map_err(|e| Error::Config(format!("configuration file: {e}")))
}
