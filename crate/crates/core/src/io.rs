//! JSONL persistence and content hashing.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("missing_input: {path}: {source}")]
    Open { path: String, source: std::io::Error },
    #[error("{path}:{line}: {detail}")]
    Parse { path: String, line: usize, detail: String },
    #[error("{path}: {source}")]
    Write { path: String, source: std::io::Error },
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| IoError::Open { path: display.clone(), source })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| IoError::Parse { path: display.clone(), line: i + 1, detail: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| IoError::Parse { path: display.clone(), line: i + 1, detail: e.to_string() })?;
        out.push(item);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    out
}

/// Writes through a temporary sibling and renames, so readers never observe
/// a half-written file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), IoError> {
    let err = |source| IoError::Write { path: path.display().to_string(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(err)?;
    }
    let tmp = path.with_extension("tmp~");
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(err)?);
        w.write_all(contents).map_err(err)?;
        w.flush().map_err(err)?;
    }
    std::fs::rename(&tmp, path).map_err(err)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), IoError> {
    write_atomic(path, to_jsonl(items).as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    std::fs::read(path)
        .map(|b| sha256_hex(&b))
        .map_err(|source| IoError::Open { path: path.display().to_string(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/items.jsonl");
        let items = vec![serde_json::json!({"a": 1}), serde_json::json!({"b": "x\ny"})];
        write_jsonl(&path, &items).unwrap();
        let back: Vec<serde_json::Value> = read_jsonl(&path).unwrap();
        assert_eq!(back, items);
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 2);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"a\":1}\n\nnot json\n").unwrap();
        let err = read_jsonl::<serde_json::Value>(&path).unwrap_err();
        assert!(err.to_string().contains(":3:"), "{err}");
    }
}
