use std::fs;
use std::path::Path;

use anyhow::anyhow;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::commands::Failure;

/// Parsed `--config` file; empty when absent.
pub fn load(path: Option<&Path>) -> Result<toml::Table, Failure> {
    let Some(path) = path else {
        return Ok(toml::Table::new());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Validation(anyhow!("config {}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map_err(|e| Failure::Validation(anyhow!("config {}: {e}", path.display())))
}

/// Fills every unset flag from the subcommand's table in the config file.
/// Keys use the flag spelling, e.g. `d-sem`.
pub fn merge<T: Serialize + DeserializeOwned>(args: T, config: &toml::Table, section: &str) -> Result<T, Failure> {
    let Some(table) = config.get(section) else {
        return Ok(args);
    };
    let table = table
        .as_table()
        .ok_or_else(|| Failure::Validation(anyhow!("config: [{section}] must be a table")))?;
    let mut value = serde_json::to_value(&args).map_err(|e| Failure::Runtime(e.into()))?;
    let obj = value.as_object_mut().expect("argument structs serialize to objects");
    for (key, v) in table {
        match obj.get(key) {
            None => return Err(Failure::Validation(anyhow!("config: unknown key {section}.{key}"))),
            Some(serde_json::Value::Null) => {
                let json = serde_json::to_value(v).map_err(|e| Failure::Validation(anyhow!("config {section}.{key}: {e}")))?;
                obj.insert(key.clone(), json);
            }
            Some(_) => {}
        }
    }
    serde_json::from_value(value).map_err(|e| Failure::Validation(anyhow!("config [{section}]: {e}")))
}
