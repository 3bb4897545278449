use serde::{Deserialize, Serialize};

use super::signature::{OpSignature, Precision};
use super::table::LatencyTable;
use super::{HwError, Result};
use crate::space::{ArchitectureDescriptor, Cell, SensorFusionCell, SpaceLayout, COMPUTE, IDENTITY, OFF, ON, TEMPORAL_KERNELS};
use crate::tensor::{Graph, NodeId, Shape3, Stride};

/// Costs of one dynamic op over its (input width, output width) grid,
/// stored row-major with one row per output option.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    pub in_options: Vec<usize>,
    pub out_options: Vec<usize>,
    pub latency_ms: Vec<f64>,
    /// Input + output + scratch bytes of the op alone.
    pub memory_bytes: Vec<f64>,
}

impl CostMatrix {
    fn build(
        table: &LatencyTable,
        precision: Precision,
        in_options: &[usize],
        out_options: &[usize],
        sig: impl Fn(usize, usize) -> OpSignature,
    ) -> Result<Self> {
        let mut latency_ms = Vec::new();
        let mut memory_bytes = Vec::new();
        for &fo in out_options {
            for &fi in in_options {
                let s = sig(fi, fo);
                let e = table.get(&s)?;
                latency_ms.push(e.latency_ms);
                memory_bytes.push(op_bytes(&s, precision, e.extra_mem_bytes));
            }
        }
        Ok(Self {
            in_options: in_options.to_vec(),
            out_options: out_options.to_vec(),
            latency_ms,
            memory_bytes,
        })
    }

    pub fn rows(&self) -> usize {
        self.out_options.len()
    }

    pub fn cols(&self) -> usize {
        self.in_options.len()
    }
}

fn op_bytes(sig: &OpSignature, precision: Precision, extra: u64) -> f64 {
    let elems = match sig.kind {
        super::OpKind::Add => 3 * sig.input.len(),
        _ => sig.input.len() + sig.output().len(),
    };
    (elems as u64 * precision.bytes() + extra) as f64
}

/// `(α̂_yᵀ·HW_lat·α̂_x, α̂_yᵀ·HW_mem·α̂_x)`.
pub fn dyn_op_cost(m: &CostMatrix, ax: &[f64], ay: &[f64]) -> Result<(f64, f64)> {
    if ax.len() != m.cols() || ay.len() != m.rows() {
        return Err(HwError::Invalid(format!(
            "cost matrix is {}x{}, relaxed vectors have {} and {} entries",
            m.rows(),
            m.cols(),
            ay.len(),
            ax.len()
        )));
    }
    let form = |h: &[f64]| {
        h.chunks_exact(m.cols())
            .zip(ay)
            .map(|(row, y)| y * row.iter().zip(ax).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    };
    Ok((form(&m.latency_ms), form(&m.memory_bytes)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareEstimate {
    pub latency_ms: f64,
    pub peak_mem_bytes: f64,
}

/// Scalar tape nodes of an estimate.
#[derive(Debug, Clone, Copy)]
pub struct HardwareNodes {
    pub latency: NodeId,
    pub peak_mem: NodeId,
}

#[derive(Debug, Clone)]
struct SfCost {
    skip: usize,
    branches: [usize; 3],
    cross_filters: usize,
    filters: usize,
    identity: Option<usize>,
    cross: CostMatrix,
    temporal: [CostMatrix; 3],
    skip_conv: CostMatrix,
    add_lat: Vec<f64>,
    add_mem: Vec<f64>,
    x_bytes: Vec<f64>,
    cross_bytes: Vec<f64>,
    out_bytes: Vec<f64>,
}

#[derive(Debug, Clone)]
enum CellCost {
    TimeReduce {
        kernel_group: usize,
        filter_group: usize,
        convs: [CostMatrix; 3],
    },
    SensorFusion(Box<SfCost>),
    Output {
        conv: CostMatrix,
        gap: (f64, f64),
        softmax: (f64, f64),
    },
}

/// Latency and peak-memory model of a search space, differentiable in the
/// relaxed decision vectors and exact at one-hot vectors.
#[derive(Debug, Clone)]
pub struct HardwareModel {
    layout: SpaceLayout,
    cells: Vec<CellCost>,
}

fn bytes(shape: Shape3, f: usize, precision: Precision) -> f64 {
    (shape.t * shape.s * f) as u64 as f64 * precision.bytes() as f64
}

impl HardwareModel {
    pub fn new(layout: &SpaceLayout, table: &LatencyTable, precision: Precision) -> Result<Self> {
        let groups = layout.groups();
        let opts = |g: usize| groups[g].filter_options().expect("filter group");
        let with_f = |s: Shape3, f: usize| Shape3::new(s.t, s.s, f);
        let mut cells = Vec::new();
        for cell in layout.cells() {
            cells.push(match cell {
                Cell::TimeReduce(c) => {
                    let outs = opts(c.filter_group);
                    let conv = |k| {
                        CostMatrix::build(table, precision, &c.in_options, outs, |fi, fo| {
                            OpSignature::conv(with_f(c.input, fi), k, 1, Stride::new(2, 1), fo)
                        })
                    };
                    CellCost::TimeReduce {
                        kernel_group: c.kernel_group,
                        filter_group: c.filter_group,
                        convs: [conv(3)?, conv(5)?, conv(7)?],
                    }
                }
                Cell::SensorFusion(c) => CellCost::SensorFusion(Box::new(Self::sensor_fusion(c, layout, table, precision)?)),
                Cell::Output(c) => {
                    let conv = CostMatrix::build(table, precision, &c.in_options, &[c.classes], |fi, fo| {
                        OpSignature::conv(with_f(c.input, fi), 1, 1, Stride::unit(), fo)
                    })?;
                    let gap_sig = OpSignature::gap(with_f(c.input, c.classes));
                    let sm_sig = OpSignature::softmax(c.classes);
                    let (ge, se) = (table.get(&gap_sig)?, table.get(&sm_sig)?);
                    CellCost::Output {
                        conv,
                        gap: (ge.latency_ms, op_bytes(&gap_sig, precision, ge.extra_mem_bytes)),
                        softmax: (se.latency_ms, op_bytes(&sm_sig, precision, se.extra_mem_bytes)),
                    }
                }
            });
        }
        Ok(Self {
            layout: layout.clone(),
            cells,
        })
    }

    fn sensor_fusion(c: &SensorFusionCell, layout: &SpaceLayout, table: &LatencyTable, precision: Precision) -> Result<SfCost> {
        let groups = layout.groups();
        let cross_opts = groups[c.cross_filters].filter_options().expect("filter group");
        let outs = groups[c.filters].filter_options().expect("filter group");
        let with_f = |s: Shape3, f: usize| Shape3::new(s.t, s.s, f);
        let stride = Stride::new(1, c.stride);
        let cross = CostMatrix::build(table, precision, &c.in_options, cross_opts, |fi, fo| {
            OpSignature::conv(with_f(c.input, fi), 1, c.input.s, stride, fo)
        })?;
        let temporal = |k| {
            CostMatrix::build(table, precision, cross_opts, outs, |fi, fo| {
                OpSignature::conv(with_f(c.output, fi), k, 1, Stride::unit(), fo)
            })
        };
        let skip_conv = CostMatrix::build(table, precision, &c.in_options, outs, |fi, fo| {
            OpSignature::conv(with_f(c.input, fi), 1, 1, stride, fo)
        })?;
        let mut add_lat = Vec::new();
        let mut add_mem = Vec::new();
        for &f in outs {
            let sig = OpSignature::add(with_f(c.output, f));
            let e = table.get(&sig)?;
            add_lat.push(e.latency_ms);
            add_mem.push(op_bytes(&sig, precision, e.extra_mem_bytes));
        }
        Ok(SfCost {
            skip: c.skip,
            branches: c.branches,
            cross_filters: c.cross_filters,
            filters: c.filters,
            identity: c.identity,
            cross,
            temporal: [temporal(TEMPORAL_KERNELS[0])?, temporal(TEMPORAL_KERNELS[1])?, temporal(TEMPORAL_KERNELS[2])?],
            skip_conv,
            add_lat,
            add_mem,
            x_bytes: c.in_options.iter().map(|&f| bytes(c.input, f, precision)).collect(),
            cross_bytes: cross_opts.iter().map(|&f| bytes(c.output, f, precision)).collect(),
            out_bytes: outs.iter().map(|&f| bytes(c.output, f, precision)).collect(),
        })
    }

    pub fn layout(&self) -> &SpaceLayout {
        &self.layout
    }

    /// Records the estimate on the tape; `relaxed` holds one simplex vector
    /// per decision group.
    pub fn estimate(&self, g: &mut Graph, relaxed: &[NodeId]) -> Result<HardwareNodes> {
        let mut p = g.constant(vec![1.0]);
        let mut lat = Vec::new();
        let mut mem = Vec::new();
        for cell in &self.cells {
            match cell {
                CellCost::TimeReduce {
                    kernel_group,
                    filter_group,
                    convs,
                } => {
                    let af = relaxed[*filter_group];
                    let mut l = Vec::new();
                    let mut m = Vec::new();
                    for (i, conv) in convs.iter().enumerate() {
                        let pk = pick(g, relaxed[*kernel_group], i)?;
                        let cl = g.bilinear(af, &conv.latency_ms, p)?;
                        let cm = g.bilinear(af, &conv.memory_bytes, p)?;
                        l.push(g.mul(pk, cl)?);
                        m.push(g.mul(pk, cm)?);
                    }
                    lat.push(g.sum(&l)?);
                    mem.push(g.sum(&m)?);
                    p = af;
                }
                CellCost::SensorFusion(c) => {
                    let (l, m, next) = sensor_fusion(g, c, relaxed, p)?;
                    lat.push(l);
                    mem.push(m);
                    p = next;
                }
                CellCost::Output { conv, gap, softmax } => {
                    lat.push(g.dot(p, &conv.latency_ms)?);
                    lat.push(g.constant(vec![gap.0]));
                    lat.push(g.constant(vec![softmax.0]));
                    mem.push(g.dot(p, &conv.memory_bytes)?);
                    mem.push(g.constant(vec![gap.1]));
                    mem.push(g.constant(vec![softmax.1]));
                }
            }
        }
        Ok(HardwareNodes {
            latency: g.sum(&lat)?,
            peak_mem: g.max(&mem)?,
        })
    }

    pub fn estimate_values(&self, relaxed: &[Vec<f64>]) -> Result<HardwareEstimate> {
        let mut g = Graph::new();
        let nodes: Vec<NodeId> = relaxed.iter().map(|v| g.constant(v.clone())).collect();
        let est = self.estimate(&mut g, &nodes)?;
        Ok(HardwareEstimate {
            latency_ms: g.scalar(est.latency),
            peak_mem_bytes: g.scalar(est.peak_mem),
        })
    }

    /// Exact cost of a discretized architecture.
    pub fn estimate_descriptor(&self, desc: &ArchitectureDescriptor) -> Result<HardwareEstimate> {
        self.estimate_values(&self.layout.one_hot(desc)?)
    }
}

fn pick(g: &mut Graph, v: NodeId, idx: usize) -> Result<NodeId> {
    let mut e = vec![0.0; g.dims(v).len()];
    e[idx] = 1.0;
    Ok(g.dot(v, &e)?)
}

/// Expected latency and peak memory of a Sensor-Fusion cell over its 16
/// gate combinations, plus the filter distribution of its output.
///
/// Schedule per combination: cross conv (if any branch is on), each enabled
/// temporal branch in kernel order with its add straight after, then the
/// skip conv and its add. The input stays live until the skip conv has run;
/// the cross output until the last branch.
fn sensor_fusion(g: &mut Graph, c: &SfCost, relaxed: &[NodeId], p: NodeId) -> Result<(NodeId, NodeId, NodeId)> {
    let a5 = relaxed[c.cross_filters];
    let a6 = relaxed[c.filters];
    let cross_lat = g.bilinear(a5, &c.cross.latency_ms, p)?;
    let cross_mem = g.bilinear(a5, &c.cross.memory_bytes, p)?;
    let mut k_lat = Vec::new();
    let mut k_mem = Vec::new();
    for m in &c.temporal {
        k_lat.push(g.bilinear(a6, &m.latency_ms, a5)?);
        k_mem.push(g.bilinear(a6, &m.memory_bytes, a5)?);
    }
    let skip_lat = g.bilinear(a6, &c.skip_conv.latency_ms, p)?;
    let skip_mem = g.bilinear(a6, &c.skip_conv.memory_bytes, p)?;
    let add_lat = g.dot(a6, &c.add_lat)?;
    let add_mem = g.dot(a6, &c.add_mem)?;
    let xb = g.dot(p, &c.x_bytes)?;
    let cb = g.dot(a5, &c.cross_bytes)?;
    let ob = g.dot(a6, &c.out_bytes)?;

    let gate = |g: &mut Graph, id: usize| -> Result<[NodeId; 2]> { Ok([pick(g, relaxed[id], OFF)?, pick(g, relaxed[id], ON)?]) };
    let branch_p = [gate(g, c.branches[0])?, gate(g, c.branches[1])?, gate(g, c.branches[2])?];
    let skip_p = gate(g, c.skip)?;

    let mut lat_terms = Vec::new();
    let mut mem_terms = Vec::new();
    for combo in 0..16usize {
        let on: Vec<usize> = (0..3).filter(|i| combo >> i & 1 == 1).collect();
        let skip = combo >> 3 & 1 == 1;
        let mut prob = skip_p[usize::from(skip)];
        for (i, bp) in branch_p.iter().enumerate() {
            prob = g.mul(prob, bp[usize::from(on.contains(&i))])?;
        }

        let mut lat = Vec::new();
        let mut mem = Vec::new();
        if !on.is_empty() {
            lat.push(cross_lat);
            mem.push(cross_mem);
        }
        for (m, &i) in on.iter().enumerate() {
            let last = m + 1 == on.len();
            let mut conv = vec![k_mem[i]];
            if m > 0 {
                conv.push(ob);
            }
            if skip {
                conv.push(xb);
            }
            lat.push(k_lat[i]);
            mem.push(g.sum(&conv)?);
            if m > 0 {
                let mut add = vec![add_mem];
                if !last {
                    add.push(cb);
                }
                if skip {
                    add.push(xb);
                }
                lat.push(add_lat);
                mem.push(g.sum(&add)?);
            }
        }
        if skip {
            lat.push(skip_lat);
            if on.is_empty() {
                mem.push(skip_mem);
            } else {
                mem.push(g.sum(&[skip_mem, ob])?);
                lat.push(add_lat);
                mem.push(add_mem);
            }
        }
        if mem.is_empty() {
            mem.push(ob);
        }
        let l = g.sum(&lat)?;
        let m = g.max(&mem)?;
        lat_terms.push(g.mul(prob, l)?);
        mem_terms.push(g.mul(prob, m)?);
    }
    let lat = g.sum(&lat_terms)?;
    let mem = g.sum(&mem_terms)?;
    match c.identity {
        Some(id) => {
            let a7 = relaxed[id];
            let compute = pick(g, a7, COMPUTE)?;
            let lat = g.mul(compute, lat)?;
            let mem = g.mul(compute, mem)?;
            let keep = g.scale(p, a7, IDENTITY)?;
            let comp = g.scale(a6, a7, COMPUTE)?;
            let next = g.add(keep, comp)?;
            Ok((lat, mem, next))
        }
        None => Ok((lat, mem, a6)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix() -> CostMatrix {
        CostMatrix {
            in_options: vec![4, 8],
            out_options: vec![4, 8],
            latency_ms: vec![1.0, 2.0, 3.0, 4.0],
            memory_bytes: vec![10.0, 20.0, 30.0, 40.0],
        }
    }

    #[test]
    fn one_hot_selects_entry() {
        assert_eq!(dyn_op_cost(&matrix(), &[0.0, 1.0], &[1.0, 0.0]).unwrap(), (2.0, 20.0));
        assert_eq!(dyn_op_cost(&matrix(), &[1.0, 0.0], &[0.0, 1.0]).unwrap(), (3.0, 30.0));
    }

    #[test]
    fn uniform_is_mean_of_entries() {
        let (l, m) = dyn_op_cost(&matrix(), &[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!((l - 2.5).abs() < 1e-12);
        assert!((m - 25.0).abs() < 1e-12);
    }

    #[test]
    fn bilinear_in_input_vector() {
        let (a, b, lam) = ([0.2, 0.8], [0.9, 0.1], 0.3);
        let mix = [lam * a[0] + (1.0 - lam) * b[0], lam * a[1] + (1.0 - lam) * b[1]];
        let y = [0.6, 0.4];
        let m = matrix();
        let lhs = dyn_op_cost(&m, &mix, &y).unwrap().0;
        let rhs = lam * dyn_op_cost(&m, &a, &y).unwrap().0 + (1.0 - lam) * dyn_op_cost(&m, &b, &y).unwrap().0;
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        assert!(dyn_op_cost(&matrix(), &[1.0], &[1.0, 0.0]).is_err());
    }
}
