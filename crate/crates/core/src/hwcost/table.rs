use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::signature::OpSignature;
use super::{HwError, Result};
use crate::space::{Cell, SpaceLayout, TEMPORAL_KERNELS};
use crate::tensor::{Shape3, Stride};

pub const TABLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub latency_ms: f64,
    pub extra_mem_bytes: u64,
}

/// Per-signature latency and scratch memory of one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub version: u32,
    pub device: String,
    pub entries: BTreeMap<String, TableEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl LatencyTable {
    pub fn new(device: String, entries: BTreeMap<String, TableEntry>) -> Self {
        Self {
            version: TABLE_VERSION,
            device,
            entries,
            metadata: BTreeMap::new(),
        }
    }

    pub fn get(&self, sig: &OpSignature) -> Result<TableEntry> {
        let key = sig.canonical();
        self.entries.get(&key).copied().ok_or(HwError::MissingEntry(key))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let table: Self = serde_json::from_str(s)?;
        if table.version != TABLE_VERSION {
            return Err(HwError::Version(table.version));
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Every operator variant any architecture of the space can execute, each
/// once, in canonical order. Dynamic convolutions contribute one signature
/// per (input width, output width) grid point.
pub fn enumerate_signatures(layout: &SpaceLayout) -> Vec<OpSignature> {
    let mut out = BTreeMap::new();
    let mut add = |sig: OpSignature| {
        out.insert(sig.canonical(), sig);
    };
    let with_f = |s: Shape3, f: usize| Shape3::new(s.t, s.s, f);
    let groups = layout.groups();
    for cell in layout.cells() {
        match cell {
            Cell::TimeReduce(c) => {
                let outs = groups[c.filter_group].filter_options().expect("filter group");
                for k in TEMPORAL_KERNELS {
                    for &fi in &c.in_options {
                        for &fo in outs {
                            add(OpSignature::conv(with_f(c.input, fi), k, 1, Stride::new(2, 1), fo));
                        }
                    }
                }
            }
            Cell::SensorFusion(c) => {
                let cross = groups[c.cross_filters].filter_options().expect("filter group");
                let outs = groups[c.filters].filter_options().expect("filter group");
                let stride = Stride::new(1, c.stride);
                for &fi in &c.in_options {
                    let x = with_f(c.input, fi);
                    for &fc in cross {
                        add(OpSignature::conv(x, 1, c.input.s, stride, fc));
                    }
                    for &fo in outs {
                        add(OpSignature::conv(x, 1, 1, stride, fo));
                    }
                }
                for &fc in cross {
                    for k in TEMPORAL_KERNELS {
                        for &fo in outs {
                            add(OpSignature::conv(with_f(c.output, fc), k, 1, Stride::unit(), fo));
                        }
                    }
                }
                for &fo in outs {
                    add(OpSignature::add(with_f(c.output, fo)));
                }
            }
            Cell::Output(c) => {
                for &fi in &c.in_options {
                    add(OpSignature::conv(with_f(c.input, fi), 1, 1, Stride::unit(), c.classes));
                }
                add(OpSignature::gap(with_f(c.input, c.classes)));
                add(OpSignature::softmax(c.classes));
            }
        }
    }
    out.into_values().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::SearchSpaceConfig;

    #[test]
    fn time_reduce_only_space_signature_count() {
        // One Time-Reduce cell fed by the 1-filter input: 3 kernels x 1 x 4
        // widths, plus 4 output convs, gap and softmax.
        let cfg = SearchSpaceConfig::new(32, 3, 2);
        let sigs = enumerate_signatures(&SpaceLayout::new(&cfg).unwrap());
        let convs = sigs.iter().filter(|s| s.stride.t == 2).count();
        assert_eq!(convs, 12);
        assert_eq!(sigs.len(), 12 + 4 + 2);
    }

    #[test]
    fn chained_dynamic_convs_span_full_grid() {
        let cfg = SearchSpaceConfig::new(64, 3, 2);
        let sigs = enumerate_signatures(&SpaceLayout::new(&cfg).unwrap());
        let second: Vec<_> = sigs.iter().filter(|s| s.stride.t == 2 && s.input.t == 32 && s.kernel == Some((3, 1))).collect();
        assert_eq!(second.len(), 16);
    }
}
