//! Scenario files (TOML). Unknown keys are rejected everywhere.
//!
//! ```toml
//! seed = 7
//! description = "two tenants"
//!
//! [device]          # any DeviceConfig field, e.g. prr_count, range_guard
//! prr_count = 4
//! [device.cost]     # any CostModel field
//! sw_call_overhead = 50e-6
//!
//! [vmm]             # any VmmConfig field
//! scrub_on_detach = true
//!
//! [[vm]]
//! id = 0
//! script = ["reprogram vec_add", "alloc a 4K", "..."]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::DeviceConfig;
use crate::vmm::{Vmm, VmmConfig, VmmConfigError};

use super::script::{parse_script, Op, ScriptError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VmSpec {
    pub id: u32,
    pub script: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub device: DeviceConfig,
    #[serde(default)]
    pub vmm: VmmConfig,
    #[serde(default, rename = "vm")]
    pub vms: Vec<VmSpec>,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Setup(#[from] VmmConfigError),
    #[error("vm {vm}, {source}")]
    Script { vm: u32, source: ScriptError },
    #[error("scenario lists no VMs")]
    NoVms,
    #[error("vm id {0} appears twice")]
    DuplicateVm(u32),
    #[error("{vms} VMs but only {prrs} regions")]
    TooManyVms { vms: usize, prrs: usize },
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Loads a file whose VM list may be empty, checking only the device
    /// and broker sections.
    pub fn load_platform(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let c: Self = toml::from_str(&text)?;
        Vmm::new(c.device.clone(), c.vmm.clone())?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Parsed scripts in VM order.
    pub fn scripts(&self) -> Result<Vec<(u32, Vec<Op>)>, ConfigError> {
        self.vms
            .iter()
            .map(|v| {
                parse_script(&v.script)
                    .map(|ops| (v.id, ops))
                    .map_err(|source| ConfigError::Script { vm: v.id, source })
            })
            .collect()
    }

    /// Everything checked before a simulation may start.
    pub fn validate(&self) -> Result<(), ConfigError> {
        Vmm::new(self.device.clone(), self.vmm.clone())?;
        if self.vms.is_empty() {
            return Err(ConfigError::NoVms);
        }
        let mut ids: Vec<u32> = self.vms.iter().map(|v| v.id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(ConfigError::DuplicateVm(w[0]));
        }
        if self.vms.len() > self.device.prr_count {
            return Err(ConfigError::TooManyVms {
                vms: self.vms.len(),
                prrs: self.device.prr_count,
            });
        }
        self.scripts().map(drop)
    }
}
