//! Versioned JSON checkpoints holding named networks plus free-form metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub networks: BTreeMap<String, Mlp>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            kind: kind.into(),
            meta,
            networks: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: &str, net: &Mlp) -> Self {
        self.networks.insert(name.into(), net.clone());
        self
    }

    pub fn network(&self, name: &str) -> Result<&Mlp> {
        self.networks.get(name).ok_or_else(|| Error::Artifact {
            path: self.kind.clone(),
            reason: format!("checkpoint has no network `{name}`"),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    /// Loads and checks version and kind.
    pub fn load(path: &Path, kind: &str) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = fs::read(path)?;
        let ck: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::Artifact {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Artifact {
                path: path.display().to_string(),
                reason: format!("unsupported checkpoint version {}", ck.format_version),
            });
        }
        if ck.kind != kind {
            return Err(Error::Artifact {
                path: path.display().to_string(),
                reason: format!("expected a `{kind}` checkpoint, found `{}`", ck.kind),
            });
        }
        Ok(ck)
    }
}
