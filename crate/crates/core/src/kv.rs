//! Flat `key = value` config files.
//!
//! Nested structs flatten to dotted keys. Values are JSON scalars; bare words
//! are read as strings. Unknown keys are rejected, missing keys keep their
//! defaults.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Render every field, defaults included, one per line.
pub fn to_kv<T: Serialize>(value: &T) -> Result<String> {
    let mut pairs = Vec::new();
    flatten("", &serde_json::to_value(value)?, &mut pairs);
    Ok(pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect())
}

fn set(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(Error::Parse(format!("`{key}` is not a config key")));
        };
        let Some(child) = map.get_mut(*part) else {
            return Err(Error::Parse(format!("unknown config key `{key}`")));
        };
        if i + 1 == parts.len() {
            *child = match (&*child, serde_json::from_str::<Value>(raw)) {
                (Value::String(_), _) => Value::String(raw.to_string()),
                (_, Ok(v)) => v,
                (_, Err(_)) => Value::String(raw.to_string()),
            };
            return Ok(());
        }
        node = child;
    }
    unreachable!()
}

/// Apply `key = value` lines on top of `base`. `#` starts a comment.
pub fn from_kv<T: Serialize + DeserializeOwned>(base: &T, text: &str) -> Result<T> {
    let mut root = serde_json::to_value(base)?;
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", n + 1)))?;
        set(&mut root, k.trim(), v.trim())?;
    }
    serde_json::from_value(root).map_err(|e| Error::Parse(e.to_string()))
}

/// Apply `(key, value)` overrides, as parsed from the command line.
pub fn apply<T: Serialize + DeserializeOwned>(base: &T, pairs: &[(String, String)]) -> Result<T> {
    let text: String = pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    from_kv(base, &text)
}

