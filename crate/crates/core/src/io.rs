//! Small file helpers shared by the table and checkpoint formats.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Formats a double with 17 significant digits; parsing the result recovers
/// the exact bit pattern.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Parses `key=value` pairs from a header line such as
/// `#freqtable v1 vocab_size=10 total=42`.
pub fn header_fields(line: &str) -> Vec<(&str, &str)> {
    line.split_whitespace()
        .filter_map(|tok| tok.split_once('='))
        .collect()
}

pub fn header_value<'a>(fields: &[(&'a str, &'a str)], key: &str) -> Option<&'a str> {
    fields.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
}
