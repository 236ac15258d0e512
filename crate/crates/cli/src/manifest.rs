//! Per-stage provenance records. Each stage directory holds a
//! `manifest.json` listing the files it produced with their SHA-256
//! digests, the digests of the parent manifests it consumed and the hash of
//! the config it ran with. Manifests carry no timestamps, so re-running a
//! stage reproduces them byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::formats::{read, read_json, sha256_hex, to_json, write_atomic};

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    /// Parent manifest path (relative to the output root) to its digest.
    pub inputs: BTreeMap<String, String>,
    /// Produced file path (relative to the output root) to its digest.
    pub artifacts: BTreeMap<String, String>,
}

impl ArtifactManifest {
    pub fn new(stage: &str, config_hash: &str) -> Self {
        Self {
            stage: stage.into(),
            tool_version: TOOL_VERSION.into(),
            config_hash: config_hash.into(),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn path(stage: &str) -> String {
        format!("{stage}/manifest.json")
    }

    /// Writes `bytes` atomically to `root/rel` and records its digest.
    pub fn put(&mut self, root: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&root.join(rel), bytes)?;
        self.artifacts.insert(rel.into(), sha256_hex(bytes));
        Ok(())
    }

    /// Records an existing file, e.g. one kept when resuming.
    pub fn record(&mut self, root: &Path, rel: &str) -> Result<()> {
        let bytes = read(&root.join(rel))?;
        self.artifacts.insert(rel.into(), sha256_hex(&bytes));
        Ok(())
    }

    /// Records the digest of a parent stage's manifest.
    pub fn depend_on(&mut self, root: &Path, parent_stage: &str) -> Result<()> {
        let rel = Self::path(parent_stage);
        let bytes = read(&root.join(&rel))?;
        self.inputs.insert(rel, sha256_hex(&bytes));
        Ok(())
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        write_atomic(&root.join(Self::path(&self.stage)), &to_json(self))
    }

    /// Loads a stage manifest and checks every artifact and parent digest
    /// against the files on disk, and the config hash against `config_hash`.
    pub fn load_verified(root: &Path, stage: &str, config_hash: &str) -> Result<Self> {
        let path = root.join(Self::path(stage));
        if !path.exists() {
            return Err(CliError::MissingInput(format!(
                "{} not found; run the {stage} stage first",
                path.display()
            )));
        }
        let manifest: Self = read_json(&path)?;
        if manifest.stage != stage {
            return Err(CliError::Provenance(format!("{} describes stage {}", path.display(), manifest.stage)));
        }
        if manifest.config_hash != config_hash {
            return Err(CliError::Provenance(format!(
                "{stage} artifacts were produced with config {}, current config is {config_hash}",
                manifest.config_hash
            )));
        }
        let check = |rel: &String, digest: &String| -> Result<()> {
            let file = root.join(rel);
            let bytes = std::fs::read(&file)
                .map_err(|e| CliError::Provenance(format!("{} listed in the {stage} manifest: {e}", file.display())))?;
            if &sha256_hex(&bytes) != digest {
                return Err(CliError::Provenance(format!("{} does not match its recorded digest", file.display())));
            }
            Ok(())
        };
        for (rel, digest) in manifest.inputs.iter().chain(&manifest.artifacts) {
            check(rel, digest)?;
        }
        Ok(manifest)
    }

    /// Artifacts under `prefix` with the given extension, in path order.
    pub fn files(&self, prefix: &str, extension: &str) -> Vec<&str> {
        self.artifacts
            .keys()
            .filter(|k| k.starts_with(prefix) && k.ends_with(extension))
            .map(String::as_str)
            .collect()
    }
}
