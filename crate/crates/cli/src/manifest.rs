//! Run manifests: what ran, with which configuration, reading and writing which files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::commands::Invocation;
use crate::error::CliError;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }

    /// Fails unless the file still exists with the recorded digest.
    pub fn verify(&self) -> Result<(), CliError> {
        let now = sha256_file(&self.path)?;
        if now != self.sha256 {
            return Err(CliError::Validation(format!(
                "{} changed since the run (sha256 {} != recorded {})",
                self.path.display(),
                now,
                self.sha256
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    /// Everything needed to run the command again.
    pub invocation: Invocation,
    /// sha256 of `config`.
    pub config_hash: String,
    /// The effective configuration (after any seed override) as TOML.
    pub config: String,
    pub input_artifact_paths: Vec<Artifact>,
    pub output_paths: Vec<Artifact>,
    pub wall_time: f64,
    pub threads: usize,
}

impl RunManifest {
    pub fn save(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(CliError::Validation(format!(
                "{}: manifest schema_version {} is not supported (expected {MANIFEST_SCHEMA_VERSION})",
                path.display(),
                m.schema_version
            )));
        }
        Ok(m)
    }

    /// Checks the config digest and every listed output.
    pub fn verify(&self) -> Result<(), CliError> {
        if sha256_hex(self.config.as_bytes()) != self.config_hash {
            return Err(CliError::Validation("manifest config does not match its hash".into()));
        }
        self.output_paths.iter().try_for_each(Artifact::verify)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn artifact_notices_changed_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        std::fs::write(&p, "one").unwrap();
        let a = Artifact::of(&p).unwrap();
        a.verify().unwrap();
        std::fs::write(&p, "two").unwrap();
        assert!(matches!(a.verify(), Err(CliError::Validation(_))));
        std::fs::remove_file(&p).unwrap();
        assert!(matches!(a.verify(), Err(CliError::Io(_))));
    }
}
