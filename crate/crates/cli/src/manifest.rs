//! Run manifests: everything needed to re-execute a scenario and compare
//! its outputs bit-for-bit.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::HarnessError;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario_name: String,
    pub experiment_kind: String,
    /// SHA-256 of the scenario TOML text.
    pub scenario_hash: String,
    /// Full scenario text; replay re-executes exactly this.
    pub scenario_toml: String,
    pub artifact_version: String,
    pub rng_algorithm: String,
    pub seeds: Vec<u64>,
    /// Output files relative to the manifest's directory.
    pub outputs: Vec<String>,
    pub wall_clock_ms: u128,
    pub pass: bool,
    pub summary: serde_json::Value,
}

pub fn hash_text(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    format!("sha256:{:x}", hasher.finalize())
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| HarnessError::Config(format!("manifest serialization failed: {e}")))?;
        std::fs::write(path, text).map_err(HarnessError::Io)
    }

    pub fn load(path: &Path) -> Result<RunManifest, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::Io)?;
        serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: bad manifest: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = RunManifest {
            scenario_name: "x".into(),
            experiment_kind: "simulate".into(),
            scenario_hash: hash_text("abc"),
            scenario_toml: "abc".into(),
            artifact_version: "0.1.0".into(),
            rng_algorithm: "philox4x64-10".into(),
            seeds: vec![1, 2],
            outputs: vec!["a.csv".into()],
            wall_clock_ms: 3,
            pass: true,
            summary: serde_json::json!({"ok": true}),
        };
        m.save(&path).unwrap();
        let r = RunManifest::load(&path).unwrap();
        assert_eq!(r.scenario_name, "x");
        assert_eq!(r.seeds, vec![1, 2]);
        assert!(r.pass);
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(hash_text("abc"), hash_text("abc"));
        assert_ne!(hash_text("abc"), hash_text("abd"));
        assert!(hash_text("abc").starts_with("sha256:"));
    }
}
