use serde::{Deserialize, Serialize};

/// Config hash and seed stamped into every persisted artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
        }
    }

    /// `# config_hash=... seed=...` header line for CSV outputs.
    pub fn csv_comment(&self) -> String {
        format!("# config_hash={} seed={}", self.config_hash, self.seed)
    }
}
