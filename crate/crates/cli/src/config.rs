//! JSON config files plus `--set path=value` overrides.

use std::path::Path;

use serde_json::{Map, Value};
use splitfed_core::{Error, Result};

/// Reads `path` (or `{}` when absent) and applies the overrides in order.
pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Value> {
    let mut v = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    for s in sets {
        apply(&mut v, s)?;
    }
    Ok(v)
}

/// `a.b.c=value`. The value is parsed as JSON when it can be, otherwise it
/// is taken as a string.
pub fn apply(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("bad override key {path:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let mut keys = path.split('.').peekable();
    while let Some(k) = keys.next() {
        let obj = match cur {
            Value::Object(m) => m,
            _ => return Err(Error::Config(format!("override {path:?} goes through a non-object"))),
        };
        if keys.peek().is_none() {
            obj.insert(k.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(k).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("path has at least one key")
}

pub fn parse<T: serde::de::DeserializeOwned>(v: Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::Config(format!("config: {e}")))
}
