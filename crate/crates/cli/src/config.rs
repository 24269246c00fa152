//! Versioned JSON configuration files.
//!
//! A file is an object with `"schema_version": 1` plus any subset of the
//! target struct's fields; given fields override `defaults` (nested objects
//! merge key by key) and unknown keys are rejected.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

pub const CONFIG_SCHEMA_VERSION: u64 = 1;

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn parse_config<T: Serialize + DeserializeOwned>(text: &str, defaults: &T) -> Result<T> {
    let mut patch: Value = serde_json::from_str(text).context("invalid JSON")?;
    let Some(obj) = patch.as_object_mut() else {
        bail!("config must be a JSON object");
    };
    match obj.remove("schema_version") {
        Some(Value::Number(n)) if n.as_u64() == Some(CONFIG_SCHEMA_VERSION) => {}
        Some(other) => bail!("unsupported schema_version {other}; expected {CONFIG_SCHEMA_VERSION}"),
        None => bail!("missing schema_version (expected {CONFIG_SCHEMA_VERSION})"),
    }
    let mut value = serde_json::to_value(defaults)?;
    merge(&mut value, patch);
    Ok(serde_json::from_value(value)?)
}

pub fn load_config<T: Serialize + DeserializeOwned>(path: &Path, defaults: &T) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text, defaults).with_context(|| format!("config {}", path.display()))
}
