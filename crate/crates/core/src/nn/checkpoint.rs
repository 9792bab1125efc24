//! Versioned JSON container for networks, optimizer state, normalizers and
//! the training step counter.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, NetParams, NnError, RunningNorm};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub nets: BTreeMap<String, NetParams<f64>>,
    pub optimizers: BTreeMap<String, Adam<f64>>,
    pub normalizers: BTreeMap<String, RunningNorm>,
    /// Loose vectors such as a policy log-std.
    pub vectors: BTreeMap<String, Vec<f64>>,
    pub meta: BTreeMap<String, String>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            step: 0,
            nets: BTreeMap::new(),
            optimizers: BTreeMap::new(),
            normalizers: BTreeMap::new(),
            vectors: BTreeMap::new(),
            meta: BTreeMap::new(),
        }
    }
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, NnError> {
        let c: Checkpoint = serde_json::from_str(s).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {}", c.version)));
        }
        for (name, n) in &c.nets {
            n.validate().map_err(|e| NnError::Checkpoint(format!("net {name}: {e}")))?;
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        std::fs::write(path, self.to_json()).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let s = std::fs::read_to_string(path).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }
}
