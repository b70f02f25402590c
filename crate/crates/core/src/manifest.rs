//! Provenance record written next to every command's outputs.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "run_manifest.toml";

/// First 16 hex digits of the SHA-256 of `text`.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config_hash: String,
    /// Fully resolved configuration text.
    pub config: String,
    pub inputs: Vec<PathBuf>,
    pub output: PathBuf,
    /// Seconds since the Unix epoch at start.
    pub started: u64,
    pub wall_clock_secs: f64,
}

/// Collects a manifest across a command's lifetime.
pub struct ManifestBuilder {
    manifest: RunManifest,
    start: Instant,
}

impl ManifestBuilder {
    pub fn start(command: &str, config: String, seed: Option<u64>, inputs: Vec<PathBuf>, output: PathBuf) -> Self {
        let started = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        ManifestBuilder {
            manifest: RunManifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                seed,
                config_hash: config_hash(&config),
                config,
                inputs,
                output,
                started,
                wall_clock_secs: 0.0,
            },
            start: Instant::now(),
        }
    }

    pub fn config_hash(&self) -> &str {
        &self.manifest.config_hash
    }

    pub fn finish(mut self) -> RunManifest {
        self.manifest.wall_clock_secs = self.start.elapsed().as_secs_f64();
        self.manifest
    }
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.message().trim().to_string())
    }

    /// Writes `dir/run_manifest.toml`, replacing any earlier one.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_text(&text).map_err(|r| Error::format(&path, None, r))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        assert_eq!(config_hash("epochs = 3\n"), config_hash("epochs = 3\n"));
        assert_ne!(config_hash("epochs = 3\n"), config_hash("epochs = 4\n"));
        assert_eq!(config_hash("").len(), 16);
        // SHA-256("abc") = ba7816bf8f01cfea…
        assert_eq!(config_hash("abc"), "ba7816bf8f01cfea");
    }

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = ManifestBuilder::start(
            "train",
            "epochs = 3\n".into(),
            Some(4),
            vec!["data".into()],
            dir.path().to_path_buf(),
        )
        .finish();
        m.save(dir.path()).unwrap();
        assert_eq!(RunManifest::load(dir.path()).unwrap(), m);
        assert!(RunManifest::from_text("command = 3").is_err());
    }
}
