use rand::Rng;

use super::kernels::{self, ConvGeometry};
use super::{mismatch, Dims, KernelShape, Padding, Result, Shape3, Stride, Tensor3, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv { x: NodeId, w: NodeId, geo: ConvGeometry },
    Bias { x: NodeId, b: NodeId },
    Relu { x: NodeId },
    ChannelMask { x: NodeId, m: NodeId },
    PrefixMask { alpha: NodeId, counts: Vec<usize> },
    Gap { x: NodeId },
    SoftmaxCe { logits: NodeId, label: usize, probs: Vec<f64> },
    Softmax { x: NodeId, inv_tau: f64 },
    Dropout { x: NodeId, scale: Vec<f64> },
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, s: NodeId, idx: usize },
    Mul { a: NodeId, b: NodeId },
    Affine { x: NodeId, a: f64 },
    Dot { v: NodeId, c: Vec<f64> },
    Bilinear { ay: NodeId, ax: NodeId, h: Vec<f64> },
    Sum { xs: Vec<NodeId> },
    Max { arg: NodeId },
    HingeLog { x: NodeId, gamma: f64 },
    FakeQuant { x: NodeId },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    dims: Dims,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Append-only record of executed operations. Node ids are issued in
/// execution order, so reverse id order is a reverse topological order.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, dims: Dims, value: Vec<f64>, requires_grad: bool) -> NodeId {
        debug_assert_eq!(dims.len(), value.len());
        self.nodes.push(Node {
            op,
            dims,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn dims(&self, id: NodeId) -> Dims {
        self.nodes[id.0].dims
    }

    /// Shape of a tensor node; kernels report their flattened size as `f`.
    pub fn shape(&self, id: NodeId) -> Shape3 {
        match self.nodes[id.0].dims {
            Dims::Tensor(s) => s,
            Dims::Kernel(k) => Shape3::new(1, 1, k.len()),
        }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    pub fn tensor(&self, id: NodeId) -> Tensor3 {
        Tensor3::new(self.shape(id), self.value(id).to_vec()).expect("node shape is consistent")
    }

    pub fn leaf(&mut self, value: Vec<f64>, dims: Dims, requires_grad: bool) -> Result<NodeId> {
        if value.len() != dims.len() {
            return Err(mismatch("leaf", dims, format!("{} values", value.len())));
        }
        Ok(self.push(Op::Leaf, dims, value, requires_grad))
    }

    pub fn input(&mut self, x: &Tensor3) -> NodeId {
        self.push(Op::Leaf, Dims::Tensor(x.shape()), x.data().to_vec(), x.requires_grad())
    }

    pub fn constant(&mut self, values: Vec<f64>) -> NodeId {
        let dims = Dims::vector(values.len());
        self.push(Op::Leaf, dims, values, false)
    }

    fn tensor_shape(&self, op: &'static str, id: NodeId) -> Result<Shape3> {
        match self.nodes[id.0].dims {
            Dims::Tensor(s) => Ok(s),
            Dims::Kernel(k) => Err(mismatch(op, "rank-3 tensor", k)),
        }
    }

    fn vector_len(&self, op: &'static str, id: NodeId) -> Result<usize> {
        let s = self.tensor_shape(op, id)?;
        if s.t != 1 || s.s != 1 {
            return Err(mismatch(op, "vector (1, 1, n)", s));
        }
        Ok(s.f)
    }

    fn expect_scalar(&self, op: &'static str, id: NodeId) -> Result<()> {
        match self.nodes[id.0].dims.len() {
            1 => Ok(()),
            _ => Err(mismatch(op, "scalar", self.nodes[id.0].dims)),
        }
    }

    pub fn conv(&mut self, x: NodeId, w: NodeId, stride: Stride, padding: Padding) -> Result<NodeId> {
        let xs = self.tensor_shape("conv", x)?;
        let ks: KernelShape = match self.nodes[w.0].dims {
            Dims::Kernel(k) => k,
            Dims::Tensor(s) => return Err(mismatch("conv", format!("input {xs}"), format!("kernel {s}"))),
        };
        let geo = ConvGeometry::new(xs, ks, stride, padding)?;
        let y = kernels::conv_forward(&geo, self.value(x), self.value(w));
        let rg = self.rg(&[x, w]);
        Ok(self.push(Op::Conv { x, w, geo }, Dims::Tensor(geo.output), y, rg))
    }

    pub fn bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.tensor_shape("bias", x)?;
        let n = self.vector_len("bias", b)?;
        if n != xs.f {
            return Err(mismatch("bias", xs, self.dims(b)));
        }
        let mut y = self.value(x).to_vec();
        kernels::add_bias(&mut y, self.value(b));
        let rg = self.rg(&[x, b]);
        Ok(self.push(Op::Bias { x, b }, Dims::Tensor(xs), y, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut y = self.value(x).to_vec();
        kernels::relu_inplace(&mut y);
        let (dims, rg) = (self.dims(x), self.rg(&[x]));
        self.push(Op::Relu { x }, dims, y, rg)
    }

    /// `out[t, s, i] = x[t, s, i] * m[i]`.
    pub fn channel_mask(&mut self, x: NodeId, m: NodeId) -> Result<NodeId> {
        let xs = self.tensor_shape("channel_mask", x)?;
        let n = self.vector_len("channel_mask", m)?;
        if n != xs.f {
            return Err(mismatch("channel_mask", xs, self.dims(m)));
        }
        let mask = self.value(m);
        let y = self
            .value(x)
            .chunks_exact(xs.f)
            .flat_map(|row| row.iter().zip(mask).map(|(a, b)| a * b))
            .collect();
        let rg = self.rg(&[x, m]);
        Ok(self.push(Op::ChannelMask { x, m }, Dims::Tensor(xs), y, rg))
    }

    /// Relaxed filter mask of width `f`: entry `c` is the total weight of
    /// options whose filter count exceeds `c`.
    pub fn prefix_mask(&mut self, alpha: NodeId, counts: &[usize], f: usize) -> Result<NodeId> {
        let n = self.vector_len("prefix_mask", alpha)?;
        if n != counts.len() || counts.iter().any(|&c| c > f) {
            return Err(mismatch("prefix_mask", format!("{counts:?} within {f}"), self.dims(alpha)));
        }
        let a = self.value(alpha);
        let mut m = vec![0.0; f];
        for (&c, &w) in counts.iter().zip(a) {
            m[..c].iter_mut().for_each(|v| *v += w);
        }
        let rg = self.rg(&[alpha]);
        Ok(self.push(
            Op::PrefixMask {
                alpha,
                counts: counts.to_vec(),
            },
            Dims::vector(f),
            m,
            rg,
        ))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.tensor_shape("global_avg_pool", x)?;
        let y = kernels::global_avg_pool(xs, self.value(x));
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Gap { x }, Dims::vector(xs.f), y, rg))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let n = self.dims(logits).len();
        if label >= n {
            return Err(TensorError::LabelOutOfRange { label, classes: n });
        }
        let z = self.value(logits);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z[label];
        let probs = kernels::softmax(z);
        let rg = self.rg(&[logits]);
        Ok(self.push(Op::SoftmaxCe { logits, label, probs }, Dims::scalar(), vec![loss], rg))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.tempered_softmax(x, None, 1.0)
    }

    /// `softmax((x + noise) / tau)`.
    pub fn tempered_softmax(&mut self, x: NodeId, noise: Option<&[f64]>, tau: f64) -> Result<NodeId> {
        let n = self.vector_len("softmax", x)?;
        if !(tau > 0.0) {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("temperature {tau} must be positive"),
            });
        }
        if noise.is_some_and(|e| e.len() != n) {
            return Err(mismatch("softmax", self.dims(x), format!("{} noise samples", noise.unwrap().len())));
        }
        let z: Vec<f64> = match noise {
            Some(e) => self.value(x).iter().zip(e).map(|(a, g)| (a + g) / tau).collect(),
            None => self.value(x).iter().map(|a| a / tau).collect(),
        };
        let y = kernels::softmax(&z);
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Softmax { x, inv_tau: 1.0 / tau }, Dims::vector(n), y, rg))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, rate: f64, training: bool, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let scale: Vec<f64> = (0..self.dims(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let y = self.value(x).iter().zip(&scale).map(|(a, b)| a * b).collect();
        let (dims, rg) = (self.dims(x), self.rg(&[x]));
        Ok(self.push(Op::Dropout { x, scale }, dims, y, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.dims(a) != self.dims(b) {
            return Err(mismatch("add", self.dims(a), self.dims(b)));
        }
        let y = self.value(a).iter().zip(self.value(b)).map(|(p, q)| p + q).collect();
        let (dims, rg) = (self.dims(a), self.rg(&[a, b]));
        Ok(self.push(Op::Add { a, b }, dims, y, rg))
    }

    /// `x * s[idx]`, the gate used to weight a path by one relaxed entry.
    pub fn scale(&mut self, x: NodeId, s: NodeId, idx: usize) -> Result<NodeId> {
        let n = self.dims(s).len();
        if idx >= n {
            return Err(mismatch("scale", format!("index {idx}"), self.dims(s)));
        }
        let k = self.value(s)[idx];
        let y = self.value(x).iter().map(|v| v * k).collect();
        let (dims, rg) = (self.dims(x), self.rg(&[x, s]));
        Ok(self.push(Op::Scale { x, s, idx }, dims, y, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.expect_scalar("mul", a)?;
        self.expect_scalar("mul", b)?;
        let y = vec![self.scalar(a) * self.scalar(b)];
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul { a, b }, Dims::scalar(), y, rg))
    }

    /// Elementwise `a * x + b` with constant `a`, `b`.
    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> NodeId {
        let y = self.value(x).iter().map(|v| a * v + b).collect();
        let (dims, rg) = (self.dims(x), self.rg(&[x]));
        self.push(Op::Affine { x, a }, dims, y, rg)
    }

    pub fn dot(&mut self, v: NodeId, c: &[f64]) -> Result<NodeId> {
        if self.dims(v).len() != c.len() {
            return Err(mismatch("dot", self.dims(v), format!("{} coefficients", c.len())));
        }
        let y = self.value(v).iter().zip(c).map(|(a, b)| a * b).sum();
        let rg = self.rg(&[v]);
        Ok(self.push(Op::Dot { v, c: c.to_vec() }, Dims::scalar(), vec![y], rg))
    }

    /// `ay^T * H * ax` with `H` stored row-major, `|ay|` rows by `|ax|` columns.
    pub fn bilinear(&mut self, ay: NodeId, h: &[f64], ax: NodeId) -> Result<NodeId> {
        let (ny, nx) = (self.dims(ay).len(), self.dims(ax).len());
        if h.len() != ny * nx {
            return Err(mismatch("bilinear", format!("{ny}x{nx}"), format!("{} entries", h.len())));
        }
        let (vy, vx) = (self.value(ay), self.value(ax));
        let mut y = 0.0;
        for (i, row) in h.chunks_exact(nx).enumerate() {
            y += vy[i] * row.iter().zip(vx).map(|(a, b)| a * b).sum::<f64>();
        }
        let rg = self.rg(&[ay, ax]);
        Ok(self.push(Op::Bilinear { ay, ax, h: h.to_vec() }, Dims::scalar(), vec![y], rg))
    }

    pub fn sum(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = xs.first() else {
            return Ok(self.constant(vec![0.0]));
        };
        let dims = self.dims(first);
        let mut y = vec![0.0; dims.len()];
        for &x in xs {
            if self.dims(x) != dims {
                return Err(mismatch("sum", dims, self.dims(x)));
            }
            y.iter_mut().zip(self.value(x)).for_each(|(a, b)| *a += b);
        }
        let rg = self.rg(xs);
        Ok(self.push(Op::Sum { xs: xs.to_vec() }, dims, y, rg))
    }

    /// Hard maximum over scalars; the gradient flows to the first argmax.
    pub fn max(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = xs.first() else {
            return Ok(self.constant(vec![0.0]));
        };
        let mut arg = first;
        for &x in xs {
            self.expect_scalar("max", x)?;
            if self.scalar(x) > self.scalar(arg) {
                arg = x;
            }
        }
        let y = vec![self.scalar(arg)];
        let rg = self.rg(&[arg]);
        Ok(self.push(Op::Max { arg }, Dims::scalar(), y, rg))
    }

    /// `gamma * ln(x / target)` when `x >= target`, else zero.
    pub fn hinge_log(&mut self, x: NodeId, target: f64, gamma: f64) -> Result<NodeId> {
        self.expect_scalar("hinge_log", x)?;
        if !(target > 0.0) {
            return Err(TensorError::Invalid {
                op: "hinge_log",
                msg: format!("target {target} must be positive"),
            });
        }
        let v = self.scalar(x);
        let y = if v >= target { gamma * (v / target).ln() } else { 0.0 };
        let gamma = if v >= target { gamma } else { 0.0 };
        let rg = self.rg(&[x]);
        Ok(self.push(Op::HingeLog { x, gamma }, Dims::scalar(), vec![y], rg))
    }

    /// Quantize-dequantize on the int8 grid of `scale`; straight-through gradient.
    pub fn fake_quant(&mut self, x: NodeId, scale: f64) -> NodeId {
        let y = self.value(x).iter().map(|&v| kernels::fake_quant(v, scale)).collect();
        let (dims, rg) = (self.dims(x), self.rg(&[x]));
        self.push(Op::FakeQuant { x }, dims, y, rg)
    }

    /// Reverse pass from a scalar root. Only nodes that require a gradient
    /// receive one.
    pub fn backward(&self, root: NodeId) -> Result<Grads> {
        self.expect_scalar("backward", root)?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(dy);
                continue;
            }
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[id.0].requires_grad {
                return;
            }
            let g = grads[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.len()]);
            f(g);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, geo } => {
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let (need_x, need_w) = (nodes[x.0].requires_grad, nodes[w.0].requires_grad);
                let mut dx = need_x.then(|| vec![0.0; xv.len()]);
                let mut dw = need_w.then(|| vec![0.0; wv.len()]);
                kernels::conv_backward(geo, xv, wv, dy, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    acc(*x, &mut |g| g.iter_mut().zip(&dx).for_each(|(a, b)| *a += b));
                }
                if let Some(dw) = dw {
                    acc(*w, &mut |g| g.iter_mut().zip(&dw).for_each(|(a, b)| *a += b));
                }
            }
            Op::Bias { x, b } => {
                acc(*x, &mut |g| g.iter_mut().zip(dy).for_each(|(a, b)| *a += b));
                acc(*b, &mut |g| {
                    let f = g.len();
                    for row in dy.chunks_exact(f) {
                        g.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Relu { x } => {
                acc(*x, &mut |g| {
                    for ((a, d), y) in g.iter_mut().zip(dy).zip(&node.value) {
                        if *y > 0.0 {
                            *a += d;
                        }
                    }
                });
            }
            Op::ChannelMask { x, m } => {
                let (xv, mv) = (&nodes[x.0].value, &nodes[m.0].value);
                let f = mv.len();
                acc(*x, &mut |g| {
                    for (grow, drow) in g.chunks_exact_mut(f).zip(dy.chunks_exact(f)) {
                        for ((a, d), k) in grow.iter_mut().zip(drow).zip(mv) {
                            *a += d * k;
                        }
                    }
                });
                acc(*m, &mut |g| {
                    for (xrow, drow) in xv.chunks_exact(f).zip(dy.chunks_exact(f)) {
                        for ((a, d), xx) in g.iter_mut().zip(drow).zip(xrow) {
                            *a += d * xx;
                        }
                    }
                });
            }
            Op::PrefixMask { alpha, counts } => {
                acc(*alpha, &mut |g| {
                    for (a, &c) in g.iter_mut().zip(counts) {
                        *a += dy[..c].iter().sum::<f64>();
                    }
                });
            }
            Op::Gap { x } => {
                let xs = match nodes[x.0].dims {
                    Dims::Tensor(s) => s,
                    Dims::Kernel(_) => unreachable!(),
                };
                let n = (xs.t * xs.s) as f64;
                acc(*x, &mut |g| {
                    for row in g.chunks_exact_mut(xs.f) {
                        row.iter_mut().zip(dy).for_each(|(a, d)| *a += d / n);
                    }
                });
            }
            Op::SoftmaxCe { logits, label, probs } => {
                acc(*logits, &mut |g| {
                    for (i, (a, p)) in g.iter_mut().zip(probs).enumerate() {
                        let t = if i == *label { 1.0 } else { 0.0 };
                        *a += dy[0] * (p - t);
                    }
                });
            }
            Op::Softmax { x, inv_tau } => {
                let y = &node.value;
                let dot: f64 = dy.iter().zip(y).map(|(a, b)| a * b).sum();
                acc(*x, &mut |g| {
                    for ((a, d), yy) in g.iter_mut().zip(dy).zip(y) {
                        *a += inv_tau * yy * (d - dot);
                    }
                });
            }
            Op::Dropout { x, scale } => {
                acc(*x, &mut |g| {
                    for ((a, d), k) in g.iter_mut().zip(dy).zip(scale) {
                        *a += d * k;
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(p, d)| *p += d));
                acc(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(p, d)| *p += d));
            }
            Op::Scale { x, s, idx } => {
                let k = nodes[s.0].value[*idx];
                acc(*x, &mut |g| g.iter_mut().zip(dy).for_each(|(a, d)| *a += d * k));
                let xv = &nodes[x.0].value;
                acc(*s, &mut |g| g[*idx] += dy.iter().zip(xv).map(|(d, v)| d * v).sum::<f64>());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (nodes[a.0].value[0], nodes[b.0].value[0]);
                acc(*a, &mut |g| g[0] += dy[0] * bv);
                acc(*b, &mut |g| g[0] += dy[0] * av);
            }
            Op::Affine { x, a } => {
                acc(*x, &mut |g| g.iter_mut().zip(dy).for_each(|(p, d)| *p += a * d));
            }
            Op::Dot { v, c } => {
                acc(*v, &mut |g| g.iter_mut().zip(c).for_each(|(p, k)| *p += dy[0] * k));
            }
            Op::Bilinear { ay, ax, h } => {
                let (vy, vx) = (&nodes[ay.0].value, &nodes[ax.0].value);
                let nx = vx.len();
                acc(*ay, &mut |g| {
                    for (gi, row) in g.iter_mut().zip(h.chunks_exact(nx)) {
                        *gi += dy[0] * row.iter().zip(vx).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                acc(*ax, &mut |g| {
                    for (row, yi) in h.chunks_exact(nx).zip(vy) {
                        for (gj, hij) in g.iter_mut().zip(row) {
                            *gj += dy[0] * yi * hij;
                        }
                    }
                });
            }
            Op::Sum { xs } => {
                for x in xs {
                    acc(*x, &mut |g| g.iter_mut().zip(dy).for_each(|(a, d)| *a += d));
                }
            }
            Op::Max { arg } => acc(*arg, &mut |g| g[0] += dy[0]),
            Op::HingeLog { x, gamma } => {
                let v = nodes[x.0].value[0];
                if *gamma != 0.0 {
                    acc(*x, &mut |g| g[0] += dy[0] * gamma / v);
                }
            }
            Op::FakeQuant { x } => {
                acc(*x, &mut |g| g.iter_mut().zip(dy).for_each(|(a, d)| *a += d));
            }
        }
    }
}
