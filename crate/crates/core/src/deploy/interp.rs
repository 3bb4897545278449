//! Reference interpreter: runs a concrete network op by op with plain
//! kernels, optionally in int8, and replays its cost on a latency table.

use std::collections::BTreeMap;

use super::quant::QuantizedNetwork;
use super::{DeployError, Result};
use crate::hwcost::{network_signatures, LatencyTable, Precision};
use crate::space::{Layer, Network};
use crate::tensor::kernels::{self, quantize};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy)]
pub enum Replay<'a> {
    None,
    Table { table: &'a LatencyTable, precision: Precision },
}

#[derive(Debug, Clone)]
pub struct Interpretation {
    pub probs: Vec<f64>,
    /// Every value in real units (dequantized for int8 runs), input first.
    pub values: Vec<Vec<f64>>,
    pub latency_ms: Option<f64>,
    pub peak_mem_bytes: Option<u64>,
}

pub fn interpret(net: &Network, quant: Option<&QuantizedNetwork>, x: &Tensor3, replay: Replay<'_>) -> Result<Interpretation> {
    if x.shape() != net.input_shape() {
        return Err(DeployError::Input(format!(
            "window shape {} does not match network input {}",
            x.shape(),
            net.input_shape()
        )));
    }
    let values = match quant {
        None => run_float(net, x),
        Some(q) => run_int8(net, q, x),
    };
    let probs = values.last().expect("network has layers").clone();
    let (latency_ms, peak_mem_bytes) = match replay {
        Replay::None => (None, None),
        Replay::Table { table, precision } => {
            let (l, m) = replay_cost(net, table, precision)?;
            (Some(l), Some(m))
        }
    };
    Ok(Interpretation {
        probs,
        values,
        latency_ms,
        peak_mem_bytes,
    })
}

fn run_float(net: &Network, x: &Tensor3) -> Vec<Vec<f64>> {
    let mut values: Vec<Vec<f64>> = vec![x.data().to_vec()];
    for node in net.layers() {
        let y = match &node.layer {
            Layer::Conv { input, weight, bias, relu, .. } => {
                let geo = net.conv_geometry(&node.layer).expect("conv layer geometry");
                let mut y = kernels::conv_forward(&geo, &values[input.0], &net.params().get(*weight).value);
                kernels::add_bias(&mut y, &net.params().get(*bias).value);
                if *relu {
                    kernels::relu_inplace(&mut y);
                }
                y
            }
            Layer::Add { a, b } => values[a.0].iter().zip(&values[b.0]).map(|(p, q)| p + q).collect(),
            Layer::Zeros => vec![0.0; node.output.len()],
            Layer::Gap { input } => kernels::global_avg_pool(net.value_shape(*input), &values[input.0]),
            Layer::Softmax { input } => kernels::softmax(&values[input.0]),
        };
        values.push(y);
    }
    values
}

fn run_int8(net: &Network, q: &QuantizedNetwork, x: &Tensor3) -> Vec<Vec<f64>> {
    let scale = |v: usize| q.params.activations[v].scale;
    let requant = |real: f64, v: usize| quantize(real, scale(v));
    let mut qs: Vec<Vec<i8>> = vec![x.data().iter().map(|v| requant(*v, 0)).collect()];
    let mut real: Vec<Vec<f64>> = Vec::new();
    let mut probs = Vec::new();
    for (i, node) in net.layers().iter().enumerate() {
        let out = i + 1;
        let y: Vec<i8> = match &node.layer {
            Layer::Conv { input, weight, bias, relu, .. } => {
                let geo = net.conv_geometry(&node.layer).expect("conv layer geometry");
                let mut acc = kernels::conv_forward_i8(&geo, &qs[input.0], q.weight_i8(*weight));
                let b = q.bias_i32(*bias);
                for row in acc.chunks_exact_mut(b.len()) {
                    row.iter_mut().zip(b).for_each(|(a, bv)| *a = a.saturating_add(*bv));
                }
                let m = scale(input.0) * q.params.params[*weight].scale;
                acc.iter()
                    .map(|a| {
                        let v = f64::from(*a) * m;
                        requant(if *relu { v.max(0.0) } else { v }, out)
                    })
                    .collect()
            }
            Layer::Add { a, b } => qs[a.0]
                .iter()
                .zip(&qs[b.0])
                .map(|(p, r)| requant(f64::from(*p) * scale(a.0) + f64::from(*r) * scale(b.0), out))
                .collect(),
            Layer::Zeros => vec![0; node.output.len()],
            Layer::Gap { input } => {
                let shape = net.value_shape(*input);
                let mut sums = vec![0i64; shape.f];
                for row in qs[input.0].chunks_exact(shape.f) {
                    sums.iter_mut().zip(row).for_each(|(s, v)| *s += i64::from(*v));
                }
                let n = (shape.t * shape.s) as f64;
                sums.iter().map(|s| requant(*s as f64 * scale(input.0) / n, out)).collect()
            }
            Layer::Softmax { input } => {
                let logits: Vec<f64> = qs[input.0].iter().map(|v| f64::from(*v) * scale(input.0)).collect();
                probs = kernels::softmax(&logits);
                vec![0; node.output.len()]
            }
        };
        qs.push(y);
    }
    for (v, q8) in qs.iter().enumerate() {
        real.push(q8.iter().map(|x| f64::from(*x) * scale(v)).collect());
    }
    *real.last_mut().expect("network has layers") = probs;
    real
}

/// Sum of per-op table latencies and the peak of live bytes under a
/// simple allocator: each output is allocated before its op runs, inputs
/// are freed after their last consumer, and unused outputs right away.
pub fn replay_cost(net: &Network, table: &LatencyTable, precision: Precision) -> Result<(f64, u64)> {
    let sigs = network_signatures(net);
    let layers = net.layers();
    let n_values = layers.len() + 1;
    let mut last_use: Vec<Option<usize>> = vec![None; n_values];
    for (i, node) in layers.iter().enumerate() {
        for v in node.layer.inputs() {
            last_use[v.0] = Some(i);
        }
    }
    let size = |v: usize| net.value_shape(crate::space::ValueId(v)).len() as u64 * precision.bytes();
    let mut live: BTreeMap<usize, u64> = BTreeMap::new();
    if last_use[0].is_some() {
        live.insert(0, size(0));
    }
    let mut latency = 0.0;
    let mut peak = 0u64;
    for (i, node) in layers.iter().enumerate() {
        let out = i + 1;
        live.insert(out, size(out));
        let extra = match &sigs[i] {
            Some(sig) => {
                let e = table.get(sig)?;
                latency += e.latency_ms;
                e.extra_mem_bytes
            }
            None => 0,
        };
        peak = peak.max(live.values().sum::<u64>() + extra);
        for v in node.layer.inputs() {
            if last_use[v.0] == Some(i) {
                live.remove(&v.0);
            }
        }
        if last_use[out].is_none() && out != layers.len() {
            live.remove(&out);
        }
    }
    Ok((latency, peak))
}
