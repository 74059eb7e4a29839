//! Layered TOML configuration: a typed default overlaid with a user document.

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Returns `base` with every key present in `text` replaced; nested tables
/// merge key by key. Unknown keys are rejected by the target type.
pub fn overlay_toml<T: Serialize + DeserializeOwned>(base: &T, text: &str) -> Result<T> {
    let patch: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let mut merged = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    merge_tables(&mut merged, patch);
    merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

fn merge_tables(base: &mut toml::Table, patch: toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge_tables(b, p),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(e.to_string()))
}
