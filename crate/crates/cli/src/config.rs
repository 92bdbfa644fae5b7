//! Flag/config-file merging. Every subcommand's flags are optional; unset
//! flags are filled from the flat key namespace of an optional TOML config
//! file, then from built-in defaults.

use crate::CliError;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use std::path::Path;

/// Flat table from a TOML config file, keys normalized to snake_case.
#[derive(Clone, Debug, Default)]
pub struct FileConfig {
    table: Map<String, Value>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let parsed: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        let mut table = Map::new();
        for (k, v) in parsed {
            let v = serde_json::to_value(v).map_err(|e| CliError::Config(e.to_string()))?;
            table.insert(k.replace('-', "_"), flatten_array(v));
        }
        Ok(FileConfig { table })
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.table.get(key)
    }

    /// Fills every unset field of `args` from the file and returns the merged
    /// value together with its JSON echo.
    pub fn merge<T: Serialize + DeserializeOwned>(&self, args: &T) -> Result<(T, Value), CliError> {
        let mut v = serde_json::to_value(args).map_err(|e| CliError::Config(e.to_string()))?;
        if let Value::Object(map) = &mut v {
            for (k, slot) in map.iter_mut() {
                if slot.is_null() {
                    if let Some(file) = self.table.get(k) {
                        *slot = file.clone();
                    }
                }
            }
        }
        let merged: T = serde_json::from_value(v.clone()).map_err(|e| CliError::Config(format!("config file: {e}")))?;
        Ok((merged, v))
    }
}

/// Numeric arrays in the file become the comma lists the flags use.
fn flatten_array(v: Value) -> Value {
    match v {
        Value::Array(items) if items.iter().all(|i| i.is_number()) => {
            Value::String(items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","))
        }
        other => other,
    }
}

pub fn parse_list(name: &str, s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| CliError::Config(format!("--{name}: cannot parse {t:?} as a number"))))
        .collect::<Result<Vec<_>, _>>()
        .and_then(|v| {
            if v.iter().all(|x| x.is_finite()) {
                Ok(v)
            } else {
                Err(CliError::Config(format!("--{name}: values must be finite")))
            }
        })
}

pub fn parse_vec3(name: &str, s: &str) -> Result<[f64; 3], CliError> {
    let v = parse_list(name, s)?;
    <[f64; 3]>::try_from(v.as_slice()).map_err(|_| CliError::Config(format!("--{name}: expected three comma-separated values")))
}

pub fn positive(name: &str, v: f64) -> Result<f64, CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::Config(format!("--{name} must be positive, got {v}")))
    }
}
