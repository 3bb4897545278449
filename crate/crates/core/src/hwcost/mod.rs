//! Hardware cost modeling: operator signatures, a device cost provider
//! (simulated or measured), the latency lookup table and the relaxed
//! latency / peak-memory estimator used during search.

mod device;
mod estimate;
mod proxy;
mod signature;
mod table;

use thiserror::Error;

use crate::space::SpaceError;
use crate::tensor::TensorError;

pub use device::{characterize, simulate_device, simulated_latency_us, DeviceProfile, Provider, SimulatedDevice};
pub use estimate::{dyn_op_cost, CostMatrix, HardwareEstimate, HardwareModel, HardwareNodes};
pub use proxy::{fit_flops_proxy, flops_estimate, r_squared, LinearFit};
pub use signature::{network_signatures, OpKind, OpSignature, Precision};
pub use table::{enumerate_signatures, LatencyTable, TableEntry, TABLE_VERSION};

#[derive(Debug, Error)]
pub enum HwError {
    #[error("latency table has no entry for {0}")]
    MissingEntry(String),
    #[error("measured table lacks {} required signatures: {}", .0.len(), .0.join(", "))]
    MissingRows(Vec<String>),
    #[error("invalid device profile: {0}")]
    InvalidProfile(String),
    #[error("measured table row {row}: {msg}")]
    BadRow { row: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("unsupported latency table version {0}")]
    Version(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, HwError>;
