//! The cell-based search space: Time-Reduce cells shrink the window,
//! Sensor-Fusion cells mix sensor channels, and a fixed Output cell
//! classifies. Every searchable choice is a [`DecisionGroup`].

mod descriptor;
mod group;
mod layout;
mod network;
mod supernet;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

pub use descriptor::{ArchitectureDescriptor, DESCRIPTOR_VERSION};
pub use group::{DecisionGroup, GroupRole, COMPUTE, IDENTITY, OFF, ON};
pub use layout::{Cell, OutputCell, SensorFusionCell, SpaceLayout, TimeReduceCell, TEMPORAL_KERNELS};
pub use network::{ForwardOptions, Layer, LayerNode, Network, ValueId};
pub use supernet::{ForwardOutput, SuperNet};

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("invalid search space config: {0}")]
    InvalidConfig(String),
    #[error("descriptor does not match the search space: {0}")]
    DescriptorMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, SpaceError>;

fn default_ts_ml() -> usize {
    16
}
fn default_ts_ms() -> usize {
    5
}
fn default_sf_s() -> usize {
    2
}
fn default_f_max_tr() -> usize {
    16
}
fn default_g_tr() -> usize {
    4
}
fn default_f_max_sf() -> usize {
    64
}
fn default_g_sf() -> usize {
    8
}
fn default_dropout() -> f64 {
    0.3
}

/// Dataset-dependent sizing of the search space plus the filter grids of
/// both searchable cell kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpaceConfig {
    /// Window length.
    pub ts_l: usize,
    /// Number of sensor channels.
    pub ts_s: usize,
    pub num_classes: usize,
    /// Minimum window length left after the Time-Reduce cells.
    #[serde(default = "default_ts_ml")]
    pub ts_ml: usize,
    /// Minimum sensor dimension left after the Sensor-Fusion cells.
    #[serde(default = "default_ts_ms")]
    pub ts_ms: usize,
    /// Extra stride-1 Sensor-Fusion cells per stride-2 cell.
    #[serde(default = "default_sf_s")]
    pub sf_s: usize,
    #[serde(default = "default_f_max_tr")]
    pub f_max_tr: usize,
    #[serde(default = "default_g_tr")]
    pub g_tr: usize,
    #[serde(default = "default_f_max_sf")]
    pub f_max_sf: usize,
    #[serde(default = "default_g_sf")]
    pub g_sf: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
}

/// Sensor-Fusion cell counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SensorFusionCount {
    pub total: usize,
    pub stride2: usize,
}

/// Largest `n` with `min * 2^n <= len`, i.e. `floor(log2(len / min))`
/// evaluated exactly in integers; zero when `len < min`.
fn floor_log2_ratio(len: usize, min: usize) -> usize {
    let mut n = 0;
    while min.checked_shl(n as u32 + 1).is_some_and(|v| v <= len) {
        n += 1;
    }
    n
}

impl SearchSpaceConfig {
    pub fn new(ts_l: usize, ts_s: usize, num_classes: usize) -> Self {
        Self {
            ts_l,
            ts_s,
            num_classes,
            ts_ml: default_ts_ml(),
            ts_ms: default_ts_ms(),
            sf_s: default_sf_s(),
            f_max_tr: default_f_max_tr(),
            g_tr: default_g_tr(),
            f_max_sf: default_f_max_sf(),
            g_sf: default_g_sf(),
            dropout_rate: default_dropout(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SpaceError::InvalidConfig(m));
        if self.ts_ml == 0 || self.ts_ms == 0 {
            return bad("ts_ml and ts_ms must be positive".into());
        }
        if self.ts_l < self.ts_ml {
            return bad(format!("ts_l {} is shorter than ts_ml {}", self.ts_l, self.ts_ml));
        }
        if self.ts_s == 0 {
            return bad("ts_s must be at least 1".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes {} must be at least 2", self.num_classes));
        }
        for (name, f_max, g) in [("tr", self.f_max_tr, self.g_tr), ("sf", self.f_max_sf, self.g_sf)] {
            if g == 0 || f_max == 0 || f_max % g != 0 {
                return bad(format!("f_max_{name} {f_max} must be a positive multiple of g_{name} {g}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    pub fn num_time_reduce_cells(&self) -> usize {
        floor_log2_ratio(self.ts_l, self.ts_ml)
    }

    pub fn num_sensor_fusion_cells(&self) -> SensorFusionCount {
        let stride2 = floor_log2_ratio(self.ts_s, self.ts_ms);
        SensorFusionCount {
            total: stride2 * (1 + self.sf_s),
            stride2,
        }
    }

    /// Stride of every Sensor-Fusion cell in order; each stage ends with its
    /// stride-2 cell.
    pub fn sensor_fusion_strides(&self) -> Vec<usize> {
        let count = self.num_sensor_fusion_cells();
        (0..count.stride2)
            .flat_map(|_| std::iter::repeat_n(1, self.sf_s).chain(std::iter::once(2)))
            .collect()
    }

    pub fn tr_filter_options(&self) -> Vec<usize> {
        (1..=self.f_max_tr / self.g_tr).map(|i| i * self.g_tr).collect()
    }

    pub fn sf_filter_options(&self) -> Vec<usize> {
        (1..=self.f_max_sf / self.g_sf).map(|i| i * self.g_sf).collect()
    }
}

/// Number of distinct discretized architectures: the product of all group
/// sizes.
pub fn cardinality(config: &SearchSpaceConfig) -> Result<BigUint> {
    let layout = SpaceLayout::new(config)?;
    Ok(layout
        .groups()
        .iter()
        .fold(BigUint::from(1u32), |acc, g| acc * BigUint::from(g.len())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_reduce_cell_count() {
        let c = |l| SearchSpaceConfig::new(l, 9, 6).num_time_reduce_cells();
        assert_eq!(c(128), 3);
        assert_eq!(c(64), 2);
        assert_eq!(c(16), 0);
        assert_eq!(c(31), 0);
        assert_eq!(c(32), 1);
    }

    #[test]
    fn sensor_fusion_cell_count() {
        let c = |s| SearchSpaceConfig::new(64, s, 6).num_sensor_fusion_cells();
        assert_eq!(c(30), SensorFusionCount { total: 6, stride2: 2 });
        assert_eq!(c(9), SensorFusionCount { total: 0, stride2: 0 });
        assert_eq!(c(3), SensorFusionCount { total: 0, stride2: 0 });
        assert_eq!(c(10), SensorFusionCount { total: 3, stride2: 1 });
    }

    #[test]
    fn stride_two_cells_close_each_stage() {
        let cfg = SearchSpaceConfig::new(64, 30, 10);
        assert_eq!(cfg.sensor_fusion_strides(), vec![1, 1, 2, 1, 1, 2]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = SearchSpaceConfig::new(128, 9, 6);
        assert!(cfg.validate().is_ok());
        cfg.g_tr = 5;
        assert!(cfg.validate().is_err());
        let cfg = SearchSpaceConfig::new(8, 9, 6);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_group_cardinality() {
        // ts_l = 2 * ts_ml and too few sensors: one Time-Reduce cell, 3 x 1 options.
        let mut cfg = SearchSpaceConfig::new(32, 3, 2);
        cfg.g_tr = 16;
        assert_eq!(cardinality(&cfg).unwrap(), BigUint::from(3u32));
    }

    #[test]
    fn time_reduce_only_cardinality() {
        let cfg = SearchSpaceConfig::new(128, 9, 6);
        assert_eq!(cardinality(&cfg).unwrap(), BigUint::from(1728u32));
    }
}
