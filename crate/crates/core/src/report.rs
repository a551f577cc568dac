//! File output helpers shared by the experiment front-ends.
//!
//! Everything here is deliberately boring: deterministic text in,
//! deterministic bytes out, so identical configurations produce
//! byte-identical artifacts.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::Result;

/// Pretty-printed JSON with a trailing newline.
pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Writes text, creating parent directories as needed.
pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, contents)?;
    Ok(())
}

/// Serializes a value as pretty JSON to the given path.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json_pretty(value)?)
}

/// Reads and deserializes a JSON file.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_through_disk() {
        let dir = std::env::temp_dir().join("gfdyn-report-test");
        let path = dir.join("value.json");
        write_json(&path, &vec![1.5f64, 2.5]).unwrap();
        let back: Vec<f64> = read_json(&path).unwrap();
        assert_eq!(back, vec![1.5, 2.5]);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.ends_with('\n'));
        fs::remove_dir_all(&dir).ok();
    }
}
