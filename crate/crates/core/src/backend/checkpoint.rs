use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Role, Seq2Seq, TinyTransformer};
use crate::error::{Error, Result};
use crate::text::Vocab;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Metadata written next to a model's tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub backend: String,
    pub role: Role,
    pub vocabulary: Vec<String>,
    pub config: serde_json::Value,
    /// SHA-256 of the canonical JSON of `config`.
    pub config_hash: String,
}

pub fn config_hash(config: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

impl CheckpointManifest {
    pub fn new(backend: &str, role: Role, vocab: &Vocab, config: &serde_json::Value) -> Self {
        Self {
            backend: backend.to_string(),
            role,
            vocabulary: vocab.tokens().to_vec(),
            config: config.clone(),
            config_hash: config_hash(config),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: Self = serde_json::from_str(&text)?;
        if manifest.config_hash != config_hash(&manifest.config) {
            return Err(Error::contract(format!("config hash mismatch in {}", dir.display())));
        }
        Ok(manifest)
    }
}

/// Loads a saved transformer checkpoint.
pub fn load_checkpoint(dir: &Path) -> Result<Box<dyn Seq2Seq>> {
    let manifest = CheckpointManifest::read(dir)?;
    match manifest.backend.as_str() {
        "tiny_transformer" => Ok(Box::new(TinyTransformer::load(dir, &manifest)?)),
        other => Err(Error::contract(format!("cannot load checkpoints of backend `{other}`"))),
    }
}
