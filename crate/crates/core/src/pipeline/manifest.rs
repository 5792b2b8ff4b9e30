use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn sha256_text(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub checkpoint: String,
    pub step: u64,
    pub seconds: f64,
    pub seed: u64,
    pub summary: serde_json::Value,
}

/// Index of a run directory: every artifact path (relative to the run
/// root) with its sha256, plus per-stage records and reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_digest: String,
    pub seed: u64,
    pub artifacts: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
    pub reports: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigestMismatch {
    pub path: String,
    pub expected: String,
    /// `None` when the file is missing.
    pub actual: Option<String>,
}

impl RunManifest {
    pub fn load_or_new(root: &Path) -> Result<Self, PipelineError> {
        let p = root.join(MANIFEST_FILE);
        if !p.exists() {
            return Ok(RunManifest { tool_version: env!("CARGO_PKG_VERSION").into(), ..Default::default() });
        }
        let text = std::fs::read_to_string(&p).map_err(|e| PipelineError::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Manifest(e.to_string()))
    }

    pub fn save(&self, root: &Path) -> Result<(), PipelineError> {
        let p = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest is plain data");
        std::fs::write(&p, text).map_err(|e| PipelineError::io(&p, e))
    }

    /// Hashes `rel` under `root` and records it.
    pub fn record(&mut self, root: &Path, rel: &str) -> Result<(), PipelineError> {
        let digest = sha256_file(&root.join(rel))?;
        self.artifacts.insert(rel.to_string(), digest);
        Ok(())
    }

    pub fn verify(&self, root: &Path) -> Vec<DigestMismatch> {
        self.artifacts
            .iter()
            .filter_map(|(rel, expected)| {
                let actual = sha256_file(&root.join(rel)).ok();
                (actual.as_ref() != Some(expected)).then(|| DigestMismatch { path: rel.clone(), expected: expected.clone(), actual })
            })
            .collect()
    }
}
