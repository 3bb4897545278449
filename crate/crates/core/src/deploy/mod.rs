//! Retraining, int8 quantization, evaluation, model files and the
//! reference interpreter.

mod interp;
mod metrics;
mod model_file;
mod quant;
mod train;

use thiserror::Error;

use crate::hwcost::{HwError, LatencyTable, Precision};
use crate::space::SpaceError;
use crate::tensor::{Tensor3, TensorError};

pub use interp::{interpret, replay_cost, Interpretation, Replay};
pub use metrics::{argmax, classification_metrics, Metrics};
pub use model_file::{export_model, import_model, model_from_json, model_to_json, DType, Storage, MODEL_FORMAT, MODEL_VERSION};
pub use quant::{quantize_int8, QuantParam, QuantValues, QuantizationParams, QuantizedNetwork, SCHEME};
pub use train::{evaluate, retrain, RetrainConfig, TrainedModel, TrainingMetadata};

#[derive(Debug, Error)]
pub enum DeployError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("bad model file: {0}")]
    Format(String),
    #[error("model file version {found}, expected {expected}")]
    Version { found: String, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Hw(#[from] HwError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DeployError>;

/// Runs `model` on one window, in int8 when it carries int8 parameters and
/// `int8` is set; with a table, also replays latency and int8 peak memory.
pub fn reference_interpret(model: &TrainedModel, x: &Tensor3, table: Option<&LatencyTable>, int8: bool) -> Result<Interpretation> {
    let quant = if int8 {
        Some(model.quant.as_ref().ok_or_else(|| DeployError::Input("model has no int8 parameters".into()))?)
    } else {
        None
    };
    let replay = match table {
        Some(table) => Replay::Table {
            table,
            precision: Precision::Int8,
        },
        None => Replay::None,
    };
    interpret(&model.network, quant, x, replay)
}
