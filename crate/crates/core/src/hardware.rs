use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::FORMAT_VERSION;

#[derive(Debug, Error)]
pub enum HardwareError {
    #[error("failed to read hardware spec {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed hardware spec: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("unsupported format_version {0} (expected {FORMAT_VERSION})")]
    FormatVersion(u32),
    #[error("{0} must be positive and finite")]
    NonPositive(&'static str),
    #[error("delta_sync must be non-negative and finite")]
    NegativeDelta,
}

/// Device budget and interconnect description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    pub format_version: u32,
    /// Device memory budget in bytes.
    pub m_budget: u64,
    /// Pre-cached inputs and other fixed overheads, bytes.
    #[serde(default)]
    pub m_others: u64,
    /// Per-iteration time outside device compute (seconds).
    #[serde(default)]
    pub delta_sync: f64,
    /// Fallback interconnect bandwidth when no transfer samples exist, bytes/s.
    pub pcie_nominal: f64,
}

impl HardwareSpec {
    pub fn new(m_budget: u64, m_others: u64, delta_sync: f64, pcie_nominal: f64) -> Self {
        HardwareSpec {
            format_version: FORMAT_VERSION,
            m_budget,
            m_others,
            delta_sync,
            pcie_nominal,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, HardwareError> {
        let hw: HardwareSpec = serde_json::from_str(text)?;
        hw.validated()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("hardware spec serializes")
    }

    pub fn validated(self) -> Result<Self, HardwareError> {
        if self.format_version != FORMAT_VERSION {
            return Err(HardwareError::FormatVersion(self.format_version));
        }
        if self.m_budget == 0 {
            return Err(HardwareError::NonPositive("m_budget"));
        }
        if !(self.pcie_nominal.is_finite() && self.pcie_nominal > 0.0) {
            return Err(HardwareError::NonPositive("pcie_nominal"));
        }
        if !(self.delta_sync.is_finite() && self.delta_sync >= 0.0) {
            return Err(HardwareError::NegativeDelta);
        }
        Ok(self)
    }
}

pub fn parse_hardware_spec(path: impl AsRef<Path>) -> Result<HardwareSpec, HardwareError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| HardwareError::Io {
        path: path.display().to_string(),
        source,
    })?;
    HardwareSpec::from_json(&text)
}
