use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

impl FileDigest {
    pub fn of(path: &Path) -> io::Result<Self> {
        let mut file = File::open(path)?;
        let mut hasher = Sha256::new();
        let mut buf = [0u8; 64 * 1024];
        let mut bytes = 0u64;
        loop {
            let n = file.read(&mut buf)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
            bytes += n as u64;
        }
        Ok(Self {
            path: path.to_path_buf(),
            sha256: hex::encode(hasher.finalize()),
            bytes,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<FileDigest>,
    pub elapsed_ms: u64,
    /// Stage-specific counts, e.g. skipped instances.
    pub stats: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub stages: Vec<StageRecord>,
    pub elapsed_ms: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: digest {actual} does not match recorded {expected}")]
    Mismatch { path: String, expected: String, actual: String },
}

impl RunManifest {
    pub fn artifacts(&self) -> impl Iterator<Item = &FileDigest> {
        self.stages.iter().flat_map(|s| s.artifacts.iter())
    }

    /// Re-reads every input and artifact and compares digests.
    pub fn verify(&self) -> Result<(), VerifyError> {
        let files = self.stages.iter().flat_map(|s| s.inputs.iter().chain(&s.artifacts));
        for recorded in files {
            let actual = FileDigest::of(&recorded.path).map_err(|source| VerifyError::Io {
                path: recorded.path.display().to_string(),
                source,
            })?;
            if actual.sha256 != recorded.sha256 {
                return Err(VerifyError::Mismatch {
                    path: recorded.path.display().to_string(),
                    expected: recorded.sha256.clone(),
                    actual: actual.sha256,
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_and_verify() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.txt");
        std::fs::write(&path, "abc").unwrap();
        let d = FileDigest::of(&path).unwrap();
        assert_eq!(d.sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(d.bytes, 3);
        let manifest = RunManifest {
            tool_version: TOOL_VERSION.into(),
            seed: 1,
            config: serde_json::Value::Null,
            stages: vec![StageRecord {
                stage: "ingest".into(),
                inputs: vec![],
                artifacts: vec![d],
                elapsed_ms: 0,
                stats: serde_json::Value::Null,
            }],
            elapsed_ms: 0,
        };
        manifest.verify().unwrap();
        std::fs::write(&path, "abd").unwrap();
        assert!(matches!(manifest.verify(), Err(VerifyError::Mismatch { .. })));
    }
}
