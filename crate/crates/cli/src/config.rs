use std::fmt;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// A mistake in how the tool was invoked; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Reads a TOML config file. Each subcommand reads the table named after it.
pub fn load_config_file(path: &Path) -> anyhow::Result<toml::Table> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

fn non_empty(v: Value) -> Option<Value> {
    match v {
        Value::Null => None,
        Value::Array(a) if a.is_empty() => None,
        v => Some(v),
    }
}

/// Values from the config section, overridden by every flag that was given.
pub fn merge<A: Serialize>(
    section: &str,
    file: Option<&toml::Table>,
    flags: &A,
) -> anyhow::Result<Map<String, Value>> {
    let mut merged = match file.and_then(|t| t.get(section)) {
        None => Map::new(),
        Some(toml::Value::Table(t)) => match serde_json::to_value(t)? {
            Value::Object(m) => m,
            _ => unreachable!(),
        },
        Some(_) => return Err(usage(format!("config entry [{section}] must be a table"))),
    };
    if let Value::Object(m) = serde_json::to_value(flags)? {
        for (k, v) in m {
            if let Some(v) = non_empty(v) {
                merged.insert(k, v);
            }
        }
    }
    Ok(merged)
}

pub fn resolve<S: DeserializeOwned>(
    section: &str,
    merged: &Map<String, Value>,
) -> anyhow::Result<S> {
    serde_json::from_value(Value::Object(merged.clone()))
        .map_err(|e| usage(format!("{section}: {e}")))
}
