//! Flat `key = value` configuration text mapped onto serde structs.
//!
//! Values are read as JSON scalars when they parse as one (`12`, `0.5`,
//! `true`), and as bare strings otherwise. `#` starts a comment. Keys must
//! already exist in the struct's default serialization.

use serde::de::DeserializeOwned;
use serde::Serialize;

fn parse_value(raw: &str) -> serde_json::Value {
    let raw = raw.trim();
    serde_json::from_str::<serde_json::Value>(raw)
        .ok()
        .filter(|v| !v.is_object() && !v.is_array())
        .unwrap_or_else(|| serde_json::Value::String(raw.trim_matches('"').to_string()))
}

/// Start from `T::default()`, apply the lines of `text`, then `overrides`.
pub fn from_kv<T: Serialize + DeserializeOwned + Default>(text: &str, overrides: &[(String, String)]) -> Result<T, String> {
    let mut map = serde_json::to_value(T::default()).map_err(|e| e.to_string())?;
    let obj = map.as_object_mut().ok_or("config must be a struct")?;
    let mut set = |key: &str, value: &str| -> Result<(), String> {
        if !obj.contains_key(key) {
            return Err(format!("unknown config key {key:?}"));
        }
        obj.insert(key.to_string(), parse_value(value));
        Ok(())
    };
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected key = value", no + 1))?;
        set(k.trim(), v)?;
    }
    for (k, v) in overrides {
        set(k.trim(), v)?;
    }
    serde_json::from_value(map).map_err(|e| e.to_string())
}

/// One `key = value` line per field, in serialization order.
pub fn to_kv<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("config serializes");
    let mut s = String::new();
    if let Some(obj) = v.as_object() {
        for (k, v) in obj {
            s.push_str(&format!("{k} = {v}\n"));
        }
    }
    s
}
