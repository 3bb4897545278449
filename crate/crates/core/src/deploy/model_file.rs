//! Versioned JSON model files with base64 little-endian tensor blobs.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::quant::{QuantValues, QuantizationParams, QuantizedNetwork};
use super::train::{TrainedModel, TrainingMetadata};
use super::{DeployError, Result};
use crate::data::Normalization;
use crate::space::{ArchitectureDescriptor, Network};
use crate::tensor::{Dims, Param};

pub const MODEL_FORMAT: &str = "micronas-model";
pub const MODEL_VERSION: u32 = 1;

/// What a model file stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Storage {
    /// f32 parameters; int8 parameters too when the model has them.
    Float,
    /// Only int8 weights and int32 biases with their scales.
    Int8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I8,
    I32,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::I8 => 1,
            DType::F32 | DType::I32 => 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorBlob {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    data: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QuantSection {
    #[serde(flatten)]
    params: QuantizationParams,
    tensors: Vec<TensorBlob>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    descriptor: ArchitectureDescriptor,
    #[serde(default)]
    tensors: Vec<TensorBlob>,
    #[serde(default)]
    quantization: Option<QuantSection>,
    #[serde(default)]
    normalization: Option<Normalization>,
    metadata: TrainingMetadata,
}

fn shape_of(dims: Dims) -> Vec<usize> {
    match dims {
        Dims::Tensor(s) => vec![s.t, s.s, s.f],
        Dims::Kernel(k) => vec![k.kt, k.ks, k.f_in, k.f_out],
    }
}

fn f32_blob(p: &Param) -> TensorBlob {
    let bytes: Vec<u8> = p.value.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    TensorBlob {
        name: p.name.clone(),
        dtype: DType::F32,
        shape: shape_of(p.dims),
        data: STANDARD.encode(bytes),
    }
}

fn quant_blob(p: &Param, v: &QuantValues) -> TensorBlob {
    let (dtype, bytes): (DType, Vec<u8>) = match v {
        QuantValues::I8(v) => (DType::I8, v.iter().map(|x| *x as u8).collect()),
        QuantValues::I32(v) => (DType::I32, v.iter().flat_map(|x| x.to_le_bytes()).collect()),
    };
    TensorBlob {
        name: p.name.clone(),
        dtype,
        shape: shape_of(p.dims),
        data: STANDARD.encode(bytes),
    }
}

fn decode(blob: &TensorBlob, expected: &Param, dtype: DType) -> Result<Vec<u8>> {
    let fmt = |msg: String| DeployError::Format(format!("tensor {}: {msg}", blob.name));
    if blob.name != expected.name {
        return Err(DeployError::Format(format!(
            "expected tensor {}, found {}",
            expected.name, blob.name
        )));
    }
    if blob.dtype != dtype {
        return Err(fmt(format!("dtype {:?}, expected {dtype:?}", blob.dtype)));
    }
    if blob.shape != shape_of(expected.dims) {
        return Err(fmt(format!("shape {:?}, expected {:?}", blob.shape, shape_of(expected.dims))));
    }
    let bytes = STANDARD.decode(&blob.data).map_err(|e| fmt(format!("bad base64: {e}")))?;
    let want = expected.value.len() * dtype.width();
    if bytes.len() != want {
        return Err(fmt(format!("blob has {} bytes, expected {want}", bytes.len())));
    }
    Ok(bytes)
}

/// Serializes to pretty JSON with keys sorted at every level.
pub fn model_to_json(model: &TrainedModel, storage: Storage) -> Result<String> {
    let params = model.network.params();
    let quantization = match (&model.quant, storage) {
        (Some(q), _) => Some(QuantSection {
            params: q.params.clone(),
            tensors: params.iter().zip(&q.values).map(|(p, v)| quant_blob(p, v)).collect(),
        }),
        (None, Storage::Int8) => return Err(DeployError::Input("int8 storage needs a quantized model".into())),
        (None, Storage::Float) => None,
    };
    let tensors = match storage {
        Storage::Float => params.iter().map(f32_blob).collect(),
        Storage::Int8 => Vec::new(),
    };
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        descriptor: model.descriptor.clone(),
        tensors,
        quantization,
        normalization: model.normalization.clone(),
        metadata: model.metadata.clone(),
    };
    let value = serde_json::to_value(&file)?;
    Ok(serde_json::to_string_pretty(&value)?)
}

pub fn model_from_json(text: &str) -> Result<TrainedModel> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| DeployError::Format(format!("truncated or malformed model file: {e}")))?;
    let version = value.get("version").and_then(serde_json::Value::as_u64);
    if version != Some(u64::from(MODEL_VERSION)) {
        return Err(DeployError::Version {
            found: version.map_or_else(|| "none".into(), |v| v.to_string()),
            expected: MODEL_VERSION,
        });
    }
    let file: ModelFile = serde_json::from_value(value).map_err(|e| DeployError::Format(e.to_string()))?;
    if file.format != MODEL_FORMAT {
        return Err(DeployError::Format(format!("unknown format {:?}", file.format)));
    }
    let skeleton = Network::from_descriptor(&file.descriptor, 0)?;
    let expected: Vec<&Param> = skeleton.params().iter().collect();

    let quant = match &file.quantization {
        None => None,
        Some(q) => {
            if q.tensors.len() != expected.len() || q.params.params.len() != expected.len() {
                return Err(DeployError::Format(format!(
                    "quantization holds {} tensors, architecture has {}",
                    q.tensors.len(),
                    expected.len()
                )));
            }
            if q.params.activations.len() != skeleton.layers().len() + 1 {
                return Err(DeployError::Format("activation scale count does not match the architecture".into()));
            }
            let mut values = Vec::with_capacity(expected.len());
            for (blob, p) in q.tensors.iter().zip(&expected) {
                let v = match blob.dtype {
                    DType::I8 => QuantValues::I8(decode(blob, p, DType::I8)?.into_iter().map(|b| b as i8).collect()),
                    DType::I32 => QuantValues::I32(
                        decode(blob, p, DType::I32)?
                            .chunks_exact(4)
                            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                            .collect(),
                    ),
                    DType::F32 => return Err(DeployError::Format(format!("tensor {}: f32 in quantization section", blob.name))),
                };
                values.push(v);
            }
            Some(QuantizedNetwork {
                params: q.params.clone(),
                values,
            })
        }
    };

    let params: Vec<Param> = if file.tensors.is_empty() {
        let q = quant
            .as_ref()
            .ok_or_else(|| DeployError::Format("model file holds neither float nor int8 tensors".into()))?;
        expected
            .iter()
            .zip(&q.values)
            .zip(&q.params.params)
            .map(|((p, v), qp)| {
                let value = match v {
                    QuantValues::I8(v) => v.iter().map(|x| f64::from(*x) * qp.scale).collect(),
                    QuantValues::I32(v) => v.iter().map(|x| f64::from(*x) * qp.scale).collect(),
                };
                Param {
                    name: p.name.clone(),
                    dims: p.dims,
                    value,
                }
            })
            .collect()
    } else {
        if file.tensors.len() != expected.len() {
            return Err(DeployError::Format(format!(
                "file holds {} tensors, architecture has {}",
                file.tensors.len(),
                expected.len()
            )));
        }
        file.tensors
            .iter()
            .zip(&expected)
            .map(|(blob, p)| {
                let bytes = decode(blob, p, DType::F32)?;
                let value = bytes
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                    .collect();
                Ok(Param {
                    name: p.name.clone(),
                    dims: p.dims,
                    value,
                })
            })
            .collect::<Result<_>>()?
    };
    let network = skeleton.with_params(params)?;
    Ok(TrainedModel {
        descriptor: file.descriptor,
        network,
        quant,
        normalization: file.normalization,
        metadata: file.metadata,
    })
}

pub fn export_model(model: &TrainedModel, path: &Path, storage: Storage) -> Result<()> {
    std::fs::write(path, model_to_json(model, storage)?)?;
    Ok(())
}

pub fn import_model(path: &Path) -> Result<TrainedModel> {
    model_from_json(&std::fs::read_to_string(path)?)
}
