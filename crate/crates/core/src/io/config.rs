//! Flat `key = value` configuration text. `#` starts a comment; blank lines are ignored.

use std::fs;
use std::path::Path;

use crate::error::{Result, TaqError};

/// Parses config text into `(key, value)` pairs in file order. A repeated key is an error.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            TaqError::InvalidConfig(format!("line {}: expected key = value", i + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(TaqError::InvalidConfig(format!(
                "line {}: empty key",
                i + 1
            )));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(TaqError::InvalidConfig(format!(
                "line {}: duplicate key {k}",
                i + 1
            )));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    parse_kv(&fs::read_to_string(path).map_err(super::at_path(path))?)
}
