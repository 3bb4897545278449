use serde::{Deserialize, Serialize};

use super::interp::{interpret, Replay};
use super::Result;
use crate::space::{Layer, Network};
use crate::tensor::kernels::{quantize, symmetric_scale};
use crate::tensor::Tensor3;

pub const SCHEME: &str = "symmetric_per_tensor_int8";

/// Scale and zero point of one quantized tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParam {
    pub scale: f64,
    pub zero_point: i32,
}

impl QuantParam {
    pub fn symmetric(scale: f64) -> Self {
        Self { scale, zero_point: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizationParams {
    pub scheme: String,
    /// One entry per network value, input first.
    pub activations: Vec<QuantParam>,
    /// One entry per network parameter, in parameter order. Biases carry
    /// the product of input and weight scales.
    pub params: Vec<QuantParam>,
}

/// Integer payload of a quantized parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantValues {
    I8(Vec<i8>),
    I32(Vec<i32>),
}

/// Int8 weights, int32 biases and the scales to run them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedNetwork {
    pub params: QuantizationParams,
    pub values: Vec<QuantValues>,
}

impl QuantizedNetwork {
    pub fn weight_i8(&self, id: usize) -> &[i8] {
        match &self.values[id] {
            QuantValues::I8(v) => v,
            QuantValues::I32(_) => panic!("parameter {id} is not an int8 tensor"),
        }
    }

    pub fn bias_i32(&self, id: usize) -> &[i32] {
        match &self.values[id] {
            QuantValues::I32(v) => v,
            QuantValues::I8(_) => panic!("parameter {id} is not an int32 tensor"),
        }
    }

    /// Bytes of stored parameters.
    pub fn param_bytes(&self) -> usize {
        self.values
            .iter()
            .map(|v| match v {
                QuantValues::I8(v) => v.len(),
                QuantValues::I32(v) => 4 * v.len(),
            })
            .sum()
    }
}

fn quantize_bias(v: f64, scale: f64) -> i32 {
    (v / scale).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32
}

/// Calibrates activation scales by max-abs over `calibration` and quantizes
/// weights per tensor.
pub fn quantize_int8(net: &Network, calibration: &[Tensor3]) -> Result<QuantizedNetwork> {
    let n_values = net.layers().len() + 1;
    let mut max_abs = vec![0.0f64; n_values];
    for x in calibration {
        let run = interpret(net, None, x, Replay::None)?;
        for (m, v) in max_abs.iter_mut().zip(&run.values) {
            *m = v.iter().fold(*m, |a, b| a.max(b.abs()));
        }
    }
    let activations: Vec<QuantParam> = max_abs
        .iter()
        .map(|&m| QuantParam::symmetric(if m > 0.0 { m / 127.0 } else { 1.0 }))
        .collect();

    let mut params = vec![QuantParam::symmetric(1.0); net.params().len()];
    let mut values: Vec<Option<QuantValues>> = vec![None; net.params().len()];
    for node in net.layers() {
        if let Layer::Conv { input, weight, bias, .. } = node.layer {
            let w = &net.params().get(weight).value;
            let ws = symmetric_scale(w);
            params[weight] = QuantParam::symmetric(ws);
            values[weight] = Some(QuantValues::I8(w.iter().map(|v| quantize(*v, ws)).collect()));
            let bs = activations[input.0].scale * ws;
            params[bias] = QuantParam::symmetric(bs);
            let b = &net.params().get(bias).value;
            values[bias] = Some(QuantValues::I32(b.iter().map(|v| quantize_bias(*v, bs)).collect()));
        }
    }
    Ok(QuantizedNetwork {
        params: QuantizationParams {
            scheme: SCHEME.into(),
            activations,
            params,
        },
        values: values.into_iter().map(|v| v.expect("every parameter belongs to a conv")).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels::fake_quant;

    #[test]
    fn uniform_weights_quantize_within_half_step() {
        let w: Vec<f64> = (0..=200).map(|i| -1.0 + i as f64 / 100.0).collect();
        let s = symmetric_scale(&w);
        assert!((s - 1.0 / 127.0).abs() < 1e-15);
        for v in &w {
            assert!((fake_quant(*v, s) - v).abs() <= s / 2.0 + 1e-15);
        }
    }

    #[test]
    fn zero_tensor_gets_unit_scale() {
        let w = vec![0.0; 8];
        let s = symmetric_scale(&w);
        assert_eq!(s, 1.0);
        assert!(w.iter().all(|v| quantize(*v, s) == 0));
    }

    #[test]
    fn requantizing_is_idempotent() {
        let s = 0.037;
        for i in -300..300 {
            let x = i as f64 * 0.0113;
            let q = quantize(x, s);
            assert_eq!(quantize(q as f64 * s, s), q);
        }
    }
}
