//! Layered configuration: built-in defaults, then an optional TOML or JSON
//! file, then command-line flags.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Overlays `top` onto `base`, recursing into objects present on both sides.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Reads a config file; `.toml` files are parsed as TOML, anything else as JSON.
pub fn read_file(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))?;
    let toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    let value = if toml {
        toml::from_str::<Value>(&text).map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))?
    } else {
        serde_json::from_str::<Value>(&text).map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))?
    };
    if !value.is_object() {
        return Err(CliError::Usage(format!("--config {}: expected a table of settings", path.display())));
    }
    Ok(value)
}

/// Sparse flag overrides addressed by dotted key.
#[derive(Default)]
pub struct Overrides(Value);

impl Overrides {
    pub fn new() -> Self {
        Self(Value::Object(Map::new()))
    }

    pub fn set<T: Serialize>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        let Some(value) = value else { return self };
        let value = serde_json::to_value(value).expect("flag values serialize");
        let mut node = &mut self.0;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            let obj = node.as_object_mut().expect("override nodes are objects");
            if parts.peek().is_none() {
                obj.insert(part.to_owned(), value);
                break;
            }
            node = obj.entry(part).or_insert_with(|| Value::Object(Map::new()));
        }
        self
    }
}

/// Resolves defaults < file < flags into a typed config.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, flags: Overrides) -> Result<T, CliError> {
    let mut value = serde_json::to_value(T::default()).expect("defaults serialize");
    if let Some(path) = file {
        merge(&mut value, read_file(path)?);
    }
    merge(&mut value, flags.0);
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config: {e}")))
}

/// Hex SHA-256 of the canonical JSON form of a resolved config.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let text = serde_json::to_string(config).expect("config serializes");
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}
