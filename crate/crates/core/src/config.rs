//! Run configuration: a structured-text file merged with flag overrides, plus
//! the key-order independent hash every artifact carries.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Serialize with object keys sorted at every depth.
pub fn canonical_json(value: &Value) -> String {
    fn canon(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<&String> = m.keys().collect();
                keys.sort();
                let mut out = Map::new();
                for k in keys {
                    out.insert(k.clone(), canon(&m[k]));
                }
                Value::Object(out)
            }
            Value::Array(items) => Value::Array(items.iter().map(canon).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string(&canon(value)).expect("json values always serialize")
}

pub fn hash_value(value: &Value) -> String {
    let digest = Sha256::digest(canonical_json(value).as_bytes());
    hex::encode(&digest[..8])
}

pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    Ok(hash_value(&serde_json::to_value(cfg)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    value: Value,
}

impl RunConfig {
    pub fn empty() -> Self {
        RunConfig {
            value: Value::Object(Map::new()),
        }
    }

    pub fn from_serializable<T: Serialize>(cfg: &T) -> Result<Self> {
        Ok(RunConfig {
            value: serde_json::to_value(cfg)?,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: Value = toml::from_str(text).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(RunConfig { value })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Ok(RunConfig {
                value: serde_json::from_str(&text)?,
            }),
            _ => RunConfig::from_toml_str(&text).map_err(|e| Error::format(path, e.to_string())),
        }
    }

    /// Overlay `other` onto `self`, recursing into tables.
    pub fn merge(&mut self, other: &RunConfig) {
        fn merge_into(dst: &mut Value, src: &Value) {
            match (dst, src) {
                (Value::Object(d), Value::Object(s)) => {
                    for (k, v) in s {
                        merge_into(d.entry(k.clone()).or_insert(Value::Null), v);
                    }
                }
                (d, s) => *d = s.clone(),
            }
        }
        merge_into(&mut self.value, &other.value);
    }

    /// Set a dotted key such as `optimizer.lr`.
    pub fn set(&mut self, dotted_key: &str, value: impl Into<Value>) {
        let mut cur = &mut self.value;
        for part in dotted_key.split('.') {
            if !cur.is_object() {
                *cur = Value::Object(Map::new());
            }
            cur = cur
                .as_object_mut()
                .expect("just made an object")
                .entry(part.to_string())
                .or_insert(Value::Null);
        }
        *cur = value.into();
    }

    /// Look up a dotted key.
    pub fn get(&self, dotted_key: &str) -> Option<&Value> {
        dotted_key
            .split('.')
            .try_fold(&self.value, |cur, part| cur.get(part))
    }

    pub fn value(&self) -> &Value {
        &self.value
    }

    pub fn hash(&self) -> String {
        hash_value(&self.value)
    }

    pub fn parse<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.value.clone())?)
    }
}
