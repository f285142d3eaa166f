//! Run manifests: every CLI invocation appends one record describing the
//! resolved config, inputs, outputs, seed, and output content hashes.
//! Manifests are reviewer metadata; primary outputs never embed wall-clock
//! values, so re-executing a manifest's command reproduces them
//! byte-for-byte.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Resolved configuration snapshot.
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: u64,
    /// SHA-256 of each output file, keyed by path.
    pub artifact_hashes: BTreeMap<String, String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn unix_millis() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// SHA-256 of a file's bytes, hex-encoded.
pub fn file_sha256(path: &Path) -> Result<String, ManifestError> {
    let bytes = std::fs::read(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex(&hasher.finalize()))
}

/// SHA-256 of an in-memory string (used for config signatures).
pub fn text_sha256(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hex(&hasher.finalize())
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

impl RunManifest {
    pub fn new(subcommand: &str, config: serde_json::Value, seed: u64) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            artifact_hashes: BTreeMap::new(),
            started_unix_ms: unix_millis(),
            finished_unix_ms: 0,
        }
    }

    pub fn record_input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    /// Records an output and its content hash (missing files hash to "").
    pub fn record_output(&mut self, path: &Path) {
        let shown = path.display().to_string();
        let hash = file_sha256(path).unwrap_or_default();
        self.artifact_hashes.insert(shown.clone(), hash);
        self.outputs.push(shown);
    }

    /// Finalizes and appends to `<out_dir>/manifests.jsonl`.
    pub fn append(mut self, out_dir: &Path) -> Result<(), ManifestError> {
        self.finished_unix_ms = unix_millis();
        let io_err = |p: &Path| {
            let p = p.to_path_buf();
            move |source| ManifestError::Io { path: p.clone(), source }
        };
        std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
        let path = out_dir.join("manifests.jsonl");
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        let mut line = serde_json::to_string(&self).expect("manifest serializes");
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(io_err(&path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_matches_known_vector() {
        // SHA-256 of the empty string.
        assert_eq!(
            text_sha256(""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            text_sha256("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_appends_with_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let artifact = dir.path().join("out.txt");
        std::fs::write(&artifact, "abc").unwrap();
        let mut m = RunManifest::new("test", serde_json::json!({"k": 1}), 7);
        m.record_input(&artifact);
        m.record_output(&artifact);
        m.append(dir.path()).unwrap();
        let body = std::fs::read_to_string(dir.path().join("manifests.jsonl")).unwrap();
        let rec: RunManifest = serde_json::from_str(body.lines().next().unwrap()).unwrap();
        assert_eq!(rec.subcommand, "test");
        assert_eq!(
            rec.artifact_hashes[&artifact.display().to_string()],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
