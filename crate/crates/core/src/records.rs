//! Line-delimited JSON records and whole-file atomic writes.

use std::io::{self, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Parses one JSON value per non-blank line. Lines starting with `//` are
/// comments. Returns `(line_number, value)` pairs.
pub fn parse_lines<T: DeserializeOwned>(text: &str) -> Result<Vec<(usize, T)>, (usize, serde_json::Error)> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with("//") {
            continue;
        }
        let value = serde_json::from_str(trimmed).map_err(|e| (n + 1, e))?;
        out.push((n + 1, value));
    }
    Ok(out)
}

pub fn to_lines<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// Writes via a temporary file in the same directory and renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
