use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::signature::{OpKind, OpSignature, Precision};
use super::table::{LatencyTable, TableEntry};
use super::{HwError, Result};
use crate::tensor::{Padding, Shape3, Stride};

/// Closed-form cost model standing in for an on-board measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedDevice {
    pub c_conv_us: f64,
    pub c_add_us: f64,
    pub c_gap_us: f64,
    pub c_softmax_us: f64,
    #[serde(default)]
    pub c_relu_us: f64,
    #[serde(default)]
    pub c_dropout_us: f64,
    pub a_us_per_mac: f64,
    pub b_us_per_byte: f64,
    pub cache_bytes: u64,
    /// Slowdown once an op's working set spills out of cache.
    pub penalty: f64,
}

impl Default for SimulatedDevice {
    fn default() -> Self {
        Self {
            c_conv_us: 20.0,
            c_add_us: 5.0,
            c_gap_us: 5.0,
            c_softmax_us: 10.0,
            c_relu_us: 0.0,
            c_dropout_us: 0.0,
            a_us_per_mac: 0.01,
            b_us_per_byte: 0.005,
            cache_bytes: 16384,
            penalty: 0.6,
        }
    }
}

impl SimulatedDevice {
    fn fixed_cost(&self, kind: OpKind) -> f64 {
        match kind {
            OpKind::Conv => self.c_conv_us,
            OpKind::Add => self.c_add_us,
            OpKind::Gap => self.c_gap_us,
            OpKind::Softmax => self.c_softmax_us,
            OpKind::Relu => self.c_relu_us,
            OpKind::Dropout => self.c_dropout_us,
        }
    }

    fn validate(&self) -> Result<()> {
        let coeffs = [
            self.c_conv_us,
            self.c_add_us,
            self.c_gap_us,
            self.c_softmax_us,
            self.c_relu_us,
            self.c_dropout_us,
            self.a_us_per_mac,
            self.b_us_per_byte,
            self.penalty,
        ];
        if coeffs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(HwError::InvalidProfile("coefficients must be finite and nonnegative".into()));
        }
        if self.cache_bytes == 0 {
            return Err(HwError::InvalidProfile("cache_bytes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provider {
    Simulated(SimulatedDevice),
    /// CSV of measured latencies, one row per signature.
    MeasuredTable { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device: String,
    pub provider: Provider,
}

impl Default for DeviceProfile {
    fn default() -> Self {
        Self {
            device: "cortex-m4-sim".into(),
            provider: Provider::Simulated(SimulatedDevice::default()),
        }
    }
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        match &self.provider {
            Provider::Simulated(sim) => sim.validate(),
            Provider::MeasuredTable { .. } => Ok(()),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let profile: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        profile.validate()?;
        Ok(profile)
    }
}

/// `c + a*macs + b*bytes`, scaled by `1 + p` when the working set does not
/// fit in cache.
pub fn simulated_latency_us(fixed_us: f64, macs: u64, bytes_moved: u64, working_set: u64, dev: &SimulatedDevice) -> f64 {
    let us = fixed_us + dev.a_us_per_mac * macs as f64 + dev.b_us_per_byte * bytes_moved as f64;
    if working_set > dev.cache_bytes {
        us * (1.0 + dev.penalty)
    } else {
        us
    }
}

/// Latency in ms and scratch bytes of one op on the simulated device.
/// Convolutions need `2 * k_t * k_s * f_in` bytes of scratch.
pub fn simulate_device(sig: &OpSignature, dev: &SimulatedDevice) -> (f64, u64) {
    let extra = match (sig.kind, sig.kernel) {
        (OpKind::Conv, Some((kt, ks))) => (2 * kt * ks * sig.input.f) as u64,
        _ => 0,
    };
    let bytes = sig.bytes_moved(Precision::Int8);
    let working_set = if bytes == 0 { 0 } else { bytes + extra };
    let us = simulated_latency_us(dev.fixed_cost(sig.kind), sig.macs(), bytes, working_set, dev);
    (us / 1000.0, extra)
}

#[derive(Debug, Deserialize)]
struct MeasuredRow {
    op_kind: String,
    t: usize,
    s: usize,
    f_in: usize,
    k_t: usize,
    k_s: usize,
    stride_t: usize,
    stride_s: usize,
    padding: String,
    f_out: usize,
    latency_us: f64,
    extra_mem_bytes: u64,
}

fn read_measured(path: &Path) -> Result<BTreeMap<String, TableEntry>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for (i, row) in reader.deserialize::<MeasuredRow>().enumerate() {
        let row = row?;
        let bad = |msg: String| HwError::BadRow { row: i + 2, msg };
        let kind = OpKind::parse(&row.op_kind).ok_or_else(|| bad(format!("unknown op_kind {:?}", row.op_kind)))?;
        let padding = match row.padding.as_str() {
            "same" => Padding::Same,
            "valid" => Padding::Valid,
            other => return Err(bad(format!("unknown padding {other:?}"))),
        };
        if !row.latency_us.is_finite() || row.latency_us < 0.0 {
            return Err(bad(format!("latency_us {} must be nonnegative", row.latency_us)));
        }
        let sig = OpSignature {
            kind,
            input: Shape3::new(row.t, row.s, row.f_in),
            kernel: (row.k_t > 0).then_some((row.k_t, row.k_s)),
            stride: Stride::new(row.stride_t, row.stride_s),
            padding,
            f_out: row.f_out,
        };
        out.insert(
            sig.canonical(),
            TableEntry {
                latency_ms: row.latency_us / 1000.0,
                extra_mem_bytes: row.extra_mem_bytes,
            },
        );
    }
    Ok(out)
}

/// Builds the lookup table for `signatures` from the profile's provider.
pub fn characterize(profile: &DeviceProfile, signatures: &[OpSignature]) -> Result<LatencyTable> {
    profile.validate()?;
    let entries: BTreeMap<String, TableEntry> = match &profile.provider {
        Provider::Simulated(dev) => signatures
            .par_iter()
            .map(|sig| {
                let (latency_ms, extra_mem_bytes) = simulate_device(sig, dev);
                (
                    sig.canonical(),
                    TableEntry {
                        latency_ms,
                        extra_mem_bytes,
                    },
                )
            })
            .collect(),
        Provider::MeasuredTable { path } => {
            let measured = read_measured(path)?;
            let missing: Vec<String> = signatures
                .iter()
                .map(OpSignature::canonical)
                .filter(|k| !measured.contains_key(k))
                .collect();
            if !missing.is_empty() {
                return Err(HwError::MissingRows(missing));
            }
            signatures
                .iter()
                .map(|s| (s.canonical(), measured[&s.canonical()]))
                .collect()
        }
    };
    Ok(LatencyTable::new(profile.device.clone(), entries))
}
