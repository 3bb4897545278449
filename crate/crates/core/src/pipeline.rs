//! End-to-end orchestration shared by the command-line tool and tests:
//! layered configuration, search with feasibility checks and target sweeps.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::data::{DataError, WindowedDataset};
use crate::deploy::{evaluate, retrain, DeployError, RetrainConfig, TrainedModel};
use crate::dnas::{search, SearchConfig, SearchError, SearchOutcome};
use crate::hwcost::{HardwareModel, HwError, LatencyTable, Precision};
use crate::space::{SearchSpaceConfig, SpaceError, SuperNet};
use crate::tensor::Tensor3;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{flag} {path}: {source}")]
    File {
        flag: String,
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{flag} {path}: {msg}")]
    Parse { flag: String, path: PathBuf, msg: String },
    #[error("{0}")]
    Usage(String),
    #[error("no architecture meets the targets: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Hw(#[from] HwError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Deploy(#[from] DeployError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_INFEASIBLE: i32 = 4;

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::File { .. } => "missing_input",
            Error::Parse { .. } => "bad_input",
            Error::Usage(_) => "usage",
            Error::Infeasible(_) => "infeasible",
            Error::Data(_) => "data",
            Error::Space(_) => "space",
            Error::Hw(HwError::MissingEntry(_) | HwError::MissingRows(_)) => "missing_table_entry",
            Error::Hw(_) => "hardware",
            Error::Search(SearchError::NonFinite { .. }) => "diverged",
            Error::Search(_) => "search",
            Error::Deploy(DeployError::Diverged { .. }) => "diverged",
            Error::Deploy(DeployError::Format(_) | DeployError::Version { .. }) => "bad_model",
            Error::Deploy(_) => "deploy",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => EXIT_USAGE,
            Error::Infeasible(_) => EXIT_INFEASIBLE,
            Error::File { .. }
            | Error::Parse { .. }
            | Error::Data(_)
            | Error::Space(_)
            | Error::Hw(_)
            | Error::Search(SearchError::EmptySplit(_) | SearchError::Config(_))
            | Error::Deploy(DeployError::Input(_) | DeployError::Format(_) | DeployError::Version { .. }) => EXIT_INPUT,
            _ => EXIT_OTHER,
        }
    }

    /// `error: kind=<kind> msg="<message>"` on one line.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
        format!("error: kind={} msg=\"{msg}\"", self.kind())
    }
}

/// Reads a file given by `flag`, naming the flag on failure.
pub fn read_input(flag: &str, path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::File {
        flag: flag.into(),
        path: path.into(),
        source,
    })
}

/// Reads and parses a JSON file given by `flag`.
pub fn read_json<T: DeserializeOwned>(flag: &str, path: &Path) -> Result<T> {
    let text = read_input(flag, path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        flag: flag.into(),
        path: path.into(),
        msg: e.to_string(),
    })
}

/// Optional sections of a configuration file; each mirrors the field
/// names of the structure it configures.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub space: Option<Value>,
    #[serde(default)]
    pub search: Option<Value>,
    #[serde(default)]
    pub retrain: Option<Value>,
}

/// Overlays `layers` onto the serialized `base`, later layers winning
/// field by field, and deserializes the result.
pub fn layered<T: Serialize + DeserializeOwned>(base: &T, layers: &[Option<&Value>]) -> Result<T> {
    let mut value = serde_json::to_value(base)?;
    for layer in layers.iter().flatten() {
        let Value::Object(fields) = layer else {
            return Err(Error::Usage(format!("configuration section must be an object, got {layer}")));
        };
        let Value::Object(target) = &mut value else { unreachable!("structs serialize to objects") };
        for (k, v) in fields {
            target.insert(k.clone(), v.clone());
        }
    }
    Ok(serde_json::from_value(value)?)
}

/// Default space for a dataset: window shape and class count from the data.
pub fn default_space(data: &WindowedDataset) -> SearchSpaceConfig {
    let shape = data.window_shape();
    SearchSpaceConfig::new(shape.t, shape.s, data.num_classes())
}

/// Searches and checks the discretized result against the targets.
pub fn search_checked(
    space: &SearchSpaceConfig,
    data: &WindowedDataset,
    table: &LatencyTable,
    config: &SearchConfig,
) -> Result<SearchOutcome> {
    let net = SuperNet::new(space, config.seed)?;
    let hw = HardwareModel::new(net.layout(), table, Precision::Int8)?;
    Ok(search(net, data, &hw, config)?)
}

pub fn infeasibility(outcome: &SearchOutcome, config: &SearchConfig) -> Option<String> {
    if outcome.meets(config) {
        return None;
    }
    Some(format!(
        "estimated latency {:.6} ms (target {}), peak memory {} bytes (target {})",
        outcome.estimate.latency_ms,
        config.lat_target_ms.map_or("none".into(), |t| t.to_string()),
        outcome.estimate.peak_mem_bytes,
        config.mem_target_bytes.map_or("none".into(), |t| t.to_string()),
    ))
}

/// Retrains, attaches int8 parameters calibrated on the train split.
pub fn retrain_quantized(outcome_desc: &crate::space::ArchitectureDescriptor, data: &WindowedDataset, config: &RetrainConfig) -> Result<TrainedModel> {
    let mut model = retrain(outcome_desc, data, config)?;
    let calibration: Vec<Tensor3> = data.train().iter().map(|(x, _)| (*x).clone()).collect();
    model.quantize(&calibration)?;
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Lat,
    Mem,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub axis: SweepAxis,
    pub targets: Vec<f64>,
}

impl std::str::FromStr for SweepGrid {
    type Err = String;

    /// `lat=10,25,50` or `mem=4096,8192`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (axis, list) = s.split_once('=').ok_or_else(|| format!("grid {s:?} is not axis=v1,v2,..."))?;
        let axis = match axis {
            "lat" => SweepAxis::Lat,
            "mem" => SweepAxis::Mem,
            other => return Err(format!("unknown grid axis {other:?}; expected lat or mem")),
        };
        let targets = list
            .split(',')
            .map(|v| match v.trim().parse::<f64>() {
                Ok(t) if t > 0.0 => Ok(t),
                _ => Err(format!("grid target {v:?} is not a positive number")),
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { axis, targets })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub target: f64,
    pub achieved_latency_ms: f64,
    pub achieved_peak_mem_bytes: f64,
    pub accuracy_float: f64,
    pub accuracy_int8: f64,
    pub f1_float: f64,
    pub f1_int8: f64,
    pub seed: u64,
}

pub const SWEEP_HEADER: &str =
    "target,achieved_latency_ms,achieved_peak_mem_bytes,accuracy_float,accuracy_int8,f1_float,f1_int8,seed";

/// One search + retrain + test evaluation per (target, seed), run as
/// independent parallel jobs; rows come back target-major in grid order.
pub fn run_sweep(
    space: &SearchSpaceConfig,
    data: &WindowedDataset,
    table: &LatencyTable,
    grid: &SweepGrid,
    seeds: &[u64],
    search_config: &SearchConfig,
    retrain_config: &RetrainConfig,
) -> Result<Vec<SweepRow>> {
    let jobs: Vec<(f64, u64)> = grid.targets.iter().flat_map(|t| seeds.iter().map(move |s| (*t, *s))).collect();
    let rows: Vec<Result<SweepRow>> = jobs
        .par_iter()
        .map(|&(target, seed)| {
            let mut sc = search_config.clone();
            sc.seed = seed;
            match grid.axis {
                SweepAxis::Lat => sc.lat_target_ms = Some(target),
                SweepAxis::Mem => sc.mem_target_bytes = Some(target),
            }
            let outcome = search_checked(space, data, table, &sc)?;
            let rc = RetrainConfig {
                seed,
                ..retrain_config.clone()
            };
            let model = retrain_quantized(&outcome.descriptor, data, &rc)?;
            let test = data.test();
            let f = evaluate(&model, &test, false)?;
            let q = evaluate(&model, &test, true)?;
            Ok(SweepRow {
                target,
                achieved_latency_ms: outcome.estimate.latency_ms,
                achieved_peak_mem_bytes: outcome.estimate.peak_mem_bytes,
                accuracy_float: f.accuracy,
                accuracy_int8: q.accuracy,
                f1_float: f.macro_f1,
                f1_int8: q.macro_f1,
                seed,
            })
        })
        .collect();
    rows.into_iter().collect()
}

pub fn write_sweep<W: Write>(mut w: W, rows: &[SweepRow]) -> std::io::Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.target, r.achieved_latency_ms, r.achieved_peak_mem_bytes, r.accuracy_float, r.accuracy_int8, r.f1_float, r.f1_int8, r.seed
        )?;
    }
    Ok(())
}
