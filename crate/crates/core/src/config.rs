//! TOML engine configuration.
//!
//! ```toml
//! workers = 0          # 0 = one per core
//!
//! [pfr]
//! iterations = 3
//! initial_stride = 4
//!
//! [pfr.scoring]
//! lambda = 0.5
//!
//! [pfr.scoring.relation_weights]
//! spatial = 0.25
//!
//! [ptr]
//! n_chunks = 8
//! ```
//!
//! Every key is optional and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pfr::PfrConfig;
use crate::ptr::PtrConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Worker threads for parallel stages; 0 uses one per core.
    pub workers: usize,
    pub pfr: PfrConfig,
    pub ptr: PtrConfig,
}

impl EngineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: EngineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.pfr.validate()?;
        self.ptr.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// The default configuration as a commented TOML document.
    pub fn defaults_toml() -> String {
        let mut out = EngineConfig::default().to_toml();
        out.push_str("\n# Optional: scale each layer's keep ratios to hit this token fraction.\n");
        out.push_str("# [ptr]\n# target_ratio = 0.5\n");
        out
    }
}
