use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Result, SearchSpaceConfig, SpaceError};

pub const DESCRIPTOR_VERSION: u32 = 1;

/// A fully discretized architecture: one option index per decision group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub space_config: SearchSpaceConfig,
    pub choices: BTreeMap<String, usize>,
    pub version: u32,
}

impl ArchitectureDescriptor {
    pub fn new(space_config: SearchSpaceConfig, choices: BTreeMap<String, usize>) -> Self {
        Self {
            space_config,
            choices,
            version: DESCRIPTOR_VERSION,
        }
    }

    /// Pretty JSON with keys sorted at every level.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("descriptor serializes");
        serde_json::to_string_pretty(&value).expect("value serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let desc: Self = serde_json::from_str(text).map_err(|e| SpaceError::DescriptorMismatch(e.to_string()))?;
        if desc.version != DESCRIPTOR_VERSION {
            return Err(SpaceError::DescriptorMismatch(format!(
                "unsupported descriptor version {}",
                desc.version
            )));
        }
        Ok(desc)
    }
}
