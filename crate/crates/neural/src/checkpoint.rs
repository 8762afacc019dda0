//! Parameter checkpoints.
//!
//! A checkpoint is a JSON document:
//!
//! ```json
//! { "version": 1, "tensors": [ { "name": "fc", "values": [0.1, -0.2] } ] }
//! ```
//!
//! Values are written with shortest round-trip formatting, so a save/load
//! cycle restores every parameter bit-for-bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::NetError;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedParams {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub tensors: Vec<NamedParams>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, NetError> {
        serde_json::from_str(s).map_err(|e| NetError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetError> {
        fs::write(path.as_ref(), self.to_json())
            .map_err(|e| NetError::Checkpoint(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NetError> {
        let s = fs::read_to_string(path.as_ref())
            .map_err(|e| NetError::Checkpoint(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&s)
    }

    /// Prefixes every tensor name, for bundling several networks in one file.
    pub fn prefixed(mut self, prefix: &str) -> Self {
        for t in &mut self.tensors {
            t.name = format!("{prefix}{}", t.name);
        }
        self
    }

    /// Selects the tensors carrying `prefix` and strips it.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        Checkpoint {
            version: self.version,
            tensors: self
                .tensors
                .iter()
                .filter_map(|t| {
                    t.name.strip_prefix(prefix).map(|n| NamedParams {
                        name: n.to_string(),
                        values: t.values.clone(),
                    })
                })
                .collect(),
        }
    }

    pub fn merge(mut self, other: Checkpoint) -> Self {
        self.tensors.extend(other.tensors);
        self
    }
}
