//! Provenance sidecars. Every output file `x` gets `x.manifest.json` naming
//! the command, configuration and inputs that produced it; a rerun whose
//! inputs all match can be skipped.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::gateway::CostRow;
use crate::io::{sha256_file, write_atomic, IoError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputDigest {
    pub fn of(path: &Path) -> Result<Self, IoError> {
        Ok(Self { path: path.to_path_buf(), sha256: sha256_file(path)? })
    }
}

/// Everything that determines an output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunKey {
    pub command: String,
    pub args: serde_json::Value,
    pub config_hash: String,
    pub rng_seed: u64,
    pub inputs: Vec<InputDigest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub key: RunKey,
    pub output_sha256: String,
    /// Set when the run was interrupted; partial outputs are never reused.
    pub partial: bool,
    #[serde(default)]
    pub costs: Vec<CostRow>,
    pub tool_version: String,
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}

impl Manifest {
    pub fn new(key: RunKey, output: &Path, partial: bool, costs: Vec<CostRow>) -> Result<Self, IoError> {
        Ok(Self {
            key,
            output_sha256: sha256_file(output)?,
            partial,
            costs,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }

    pub fn load(output: &Path) -> Option<Self> {
        let text = std::fs::read_to_string(manifest_path(output)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn write(&self, output: &Path) -> Result<(), IoError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serialises");
        text.push('\n');
        write_atomic(&manifest_path(output), text.as_bytes())
    }
}

/// True when `output` exists, is complete, and was produced from exactly `key`.
pub fn up_to_date(output: &Path, key: &RunKey) -> bool {
    let Some(m) = Manifest::load(output) else {
        return false;
    };
    !m.partial && &m.key == key && sha256_file(output).is_ok_and(|h| h == m.output_sha256)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(dir: &Path) -> RunKey {
        let input = dir.join("in.jsonl");
        std::fs::write(&input, "{}\n").unwrap();
        RunKey {
            command: "refine".into(),
            args: serde_json::json!({"round": 1}),
            config_hash: "c".into(),
            rng_seed: 0,
            inputs: vec![InputDigest::of(&input).unwrap()],
        }
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(manifest_path(Path::new("/a/b.jsonl")), Path::new("/a/b.jsonl.manifest.json"));
    }

    #[test]
    fn freshness() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out.jsonl");
        let k = key(dir.path());
        assert!(!up_to_date(&out, &k));
        std::fs::write(&out, "x\n").unwrap();
        Manifest::new(k.clone(), &out, false, vec![]).unwrap().write(&out).unwrap();
        assert!(up_to_date(&out, &k));

        let changed = RunKey { rng_seed: 1, ..k.clone() };
        assert!(!up_to_date(&out, &changed));

        std::fs::write(&out, "edited\n").unwrap();
        assert!(!up_to_date(&out, &k));

        Manifest::new(k.clone(), &out, true, vec![]).unwrap().write(&out).unwrap();
        assert!(!up_to_date(&out, &k), "partial outputs are stale");
    }
}
