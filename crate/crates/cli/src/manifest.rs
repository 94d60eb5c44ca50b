//! Run manifest: a JSON record of every stage executed, its wall-clock
//! time, and the SHA-256 digest of every artifact it produced. A later
//! `pipeline --resume` skips a stage only when its recorded outputs
//! still exist with matching digests.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ueidg_core::error::{CoreError, Result};

use crate::config::RunConfig;

pub fn sha256_hex_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Skipped,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub duration_ms: u64,
    /// Artifact path (relative to the output directory when possible)
    /// to SHA-256 hex digest.
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    /// Crate version that produced the run.
    pub version: String,
    /// Full configuration snapshot (seeds already derived).
    pub config: RunConfig,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn new(cfg: &RunConfig) -> RunManifest {
        RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.clone(),
            stages: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Option<RunManifest> {
        let text = std::fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

/// Relativize an artifact path against the run directory for the
/// manifest; fall back to the absolute path for outside files.
pub fn manifest_key(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

pub fn digest_outputs(root: &Path, outputs: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for path in outputs {
        let digest = sha256_hex_file(path).map_err(|e| {
            CoreError::Integrity(format!("cannot digest output {}: {e}", path.display()))
        })?;
        map.insert(manifest_key(root, path), digest);
    }
    Ok(map)
}

/// True when every recorded output still exists under `root` with an
/// unchanged digest.
pub fn outputs_match(record: &StageRecord, root: &Path) -> bool {
    record.outputs.iter().all(|(rel, digest)| {
        let path = if Path::new(rel).is_absolute() {
            PathBuf::from(rel)
        } else {
            root.join(rel)
        };
        matches!(sha256_hex_file(&path), Ok(d) if d == *digest)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_matches_known_vector() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.txt");
        std::fs::write(&path, b"abc").unwrap();
        assert_eq!(
            sha256_hex_file(&path).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn outputs_match_detects_edits_and_deletions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        std::fs::write(&path, b"one\n").unwrap();
        let outputs = digest_outputs(dir.path(), &[path.clone()]).unwrap();
        let record = StageRecord {
            name: "chunk".into(),
            status: StageStatus::Completed,
            duration_ms: 1,
            outputs,
            error: None,
        };
        assert!(outputs_match(&record, dir.path()));
        std::fs::write(&path, b"two\n").unwrap();
        assert!(!outputs_match(&record, dir.path()));
        std::fs::remove_file(&path).unwrap();
        assert!(!outputs_match(&record, dir.path()));
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg: RunConfig =
            serde_json::from_str(r#"{"seed": 1, "out_dir": "/tmp/z"}"#).unwrap();
        let mut m = RunManifest::new(&cfg);
        m.stages.push(StageRecord {
            name: "synthesize".into(),
            status: StageStatus::Completed,
            duration_ms: 12,
            outputs: BTreeMap::new(),
            error: None,
        });
        let path = dir.path().join("manifest.json");
        m.write(&path).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(back.stages.len(), 1);
        assert_eq!(back.stages[0].status, StageStatus::Completed);
        assert_eq!(back.config.seed, 1);
    }
}
