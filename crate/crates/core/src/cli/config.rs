//! Flat `key = value` configuration files.
//!
//! ```text
//! # comment
//! gamma0 = 0.3
//! stop_sequence = .\n\n
//! teacher_backend = remote
//! teacher_url = http://localhost:8000/v1
//! ```
//!
//! Values may be wrapped in double quotes to keep surrounding spaces.

use std::path::Path;

use crate::types::ConfigError;

pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError(format!("line {}: expected `key = value`", i + 1)));
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError(format!("line {}: empty key", i + 1)));
        }
        let v = v.trim();
        let v = v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v);
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    parse_pairs(&text)
}

/// `key=value` from a `--set` flag.
pub fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    Ok((k.trim().to_string(), v.to_string()))
}
