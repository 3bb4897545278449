//! Concrete (discretized) networks: a topologically ordered list of layers
//! holding only the chosen operations at their chosen widths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::group::{IDENTITY, ON};
use super::layout::{Cell, SpaceLayout, TEMPORAL_KERNELS};
use super::{ArchitectureDescriptor, Result, SuperNet};
use crate::tensor::kernels::{self, ConvGeometry};
use crate::tensor::{Dims, Graph, KernelShape, NodeId, Padding, Param, ParamStore, Shape3, Stride, TensorError};

/// Value produced by a layer; `ValueId(0)` is the network input and layer
/// `i` produces `ValueId(i + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ValueId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Convolution with bias, optionally followed by ReLU.
    Conv {
        input: ValueId,
        weight: usize,
        bias: usize,
        stride: Stride,
        padding: Padding,
        relu: bool,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    /// Zero tensor standing in for a cell whose paths were all switched off.
    Zeros,
    Gap {
        input: ValueId,
    },
    Softmax {
        input: ValueId,
    },
}

impl Layer {
    pub fn inputs(&self) -> Vec<ValueId> {
        match self {
            Layer::Conv { input, .. } | Layer::Gap { input } | Layer::Softmax { input } => vec![*input],
            Layer::Add { a, b } => vec![*a, *b],
            Layer::Zeros => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub layer: Layer,
    pub output: Shape3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input: Shape3,
    classes: usize,
    layers: Vec<LayerNode>,
    params: ParamStore,
    /// Values that end a searchable cell; dropout follows them in training.
    cell_outputs: Vec<ValueId>,
    logits: ValueId,
}

/// Where a freshly built network takes its weights from.
trait WeightSource {
    fn conv(&mut self, name: &str, kernel: KernelShape) -> (Vec<f64>, Vec<f64>);
}

struct Sliced<'a>(&'a ParamStore);

impl WeightSource for Sliced<'_> {
    fn conv(&mut self, name: &str, kernel: KernelShape) -> (Vec<f64>, Vec<f64>) {
        let w = self.0.by_name(&format!("{name}.weight")).expect("supernet weight");
        let b = self.0.by_name(&format!("{name}.bias")).expect("supernet bias");
        let Dims::Kernel(full) = w.dims else { unreachable!("conv weights are rank 4") };
        let mut out = Vec::with_capacity(kernel.len());
        for kt in 0..kernel.kt {
            for ks in 0..kernel.ks {
                for fi in 0..kernel.f_in {
                    let base = full.index(kt, ks, fi, 0);
                    out.extend_from_slice(&w.value[base..base + kernel.f_out]);
                }
            }
        }
        (out, b.value[..kernel.f_out].to_vec())
    }
}

struct Fresh(ChaCha8Rng);

impl WeightSource for Fresh {
    fn conv(&mut self, name: &str, kernel: KernelShape) -> (Vec<f64>, Vec<f64>) {
        let fan_in = kernel.kt * kernel.ks * kernel.f_in;
        let w = Param::fan_in_uniform(name, Dims::Kernel(kernel), fan_in, &mut self.0);
        (w.value, vec![0.0; kernel.f_out])
    }
}

struct Builder<'s> {
    source: &'s mut dyn WeightSource,
    layers: Vec<LayerNode>,
    params: ParamStore,
    shapes: Vec<Shape3>,
}

impl Builder<'_> {
    fn push(&mut self, layer: Layer, output: Shape3) -> ValueId {
        self.layers.push(LayerNode { layer, output });
        self.shapes.push(output);
        ValueId(self.shapes.len() - 1)
    }

    fn conv(&mut self, name: &str, input: ValueId, kernel: KernelShape, stride: Stride, relu: bool) -> Result<ValueId> {
        let geo = ConvGeometry::new(self.shapes[input.0], kernel, stride, Padding::Same)?;
        let (w, b) = self.source.conv(name, kernel);
        let weight = self.params.push(Param {
            name: format!("{name}.weight"),
            dims: Dims::Kernel(kernel),
            value: w,
        });
        let bias = self.params.push(Param {
            name: format!("{name}.bias"),
            dims: Dims::vector(kernel.f_out),
            value: b,
        });
        let layer = Layer::Conv {
            input,
            weight,
            bias,
            stride,
            padding: Padding::Same,
            relu,
        };
        Ok(self.push(layer, geo.output))
    }

    fn add(&mut self, acc: Option<ValueId>, v: ValueId) -> ValueId {
        match acc {
            None => v,
            Some(a) => {
                let shape = self.shapes[v.0];
                self.push(Layer::Add { a, b: v }, shape)
            }
        }
    }
}

impl Network {
    fn build(layout: &SpaceLayout, desc: &ArchitectureDescriptor, source: &mut dyn WeightSource) -> Result<Self> {
        let choices = layout.resolve(desc)?;
        let groups = layout.groups();
        let filters = |g: usize| groups[g].filter_options().expect("filter group")[choices[g]];
        let input = layout.input_shape();
        let mut b = Builder {
            source,
            layers: Vec::new(),
            params: ParamStore::new(),
            shapes: vec![input],
        };
        let mut cur = ValueId(0);
        let mut cell_outputs = Vec::new();

        for cell in layout.cells() {
            let width = b.shapes[cur.0].f;
            match cell {
                Cell::TimeReduce(c) => {
                    let k = TEMPORAL_KERNELS[choices[c.kernel_group]];
                    let kernel = KernelShape::new(k, 1, width, filters(c.filter_group));
                    cur = b.conv(&format!("tr{}.k{k}", c.index), cur, kernel, Stride::new(2, 1), true)?;
                }
                Cell::SensorFusion(c) => {
                    if c.identity.is_some_and(|g| choices[g] == IDENTITY) {
                        continue;
                    }
                    let j = c.index;
                    let stride = Stride::new(1, c.stride);
                    let (f_cross, f) = (filters(c.cross_filters), filters(c.filters));
                    let x = cur;
                    let s_in = b.shapes[x.0].s;
                    let mut acc = None;
                    let mut cross = None;
                    for (gate, k) in c.branches.iter().zip(TEMPORAL_KERNELS) {
                        if choices[*gate] == ON {
                            let cross = match cross {
                                Some(v) => v,
                                None => {
                                    let kernel = KernelShape::new(1, s_in, width, f_cross);
                                    *cross.insert(b.conv(&format!("sf{j}.cross"), x, kernel, stride, true)?)
                                }
                            };
                            let y = b.conv(&format!("sf{j}.k{k}"), cross, KernelShape::new(k, 1, f_cross, f), Stride::unit(), true)?;
                            acc = Some(b.add(acc, y));
                        }
                    }
                    if choices[c.skip] == ON {
                        let y = b.conv(&format!("sf{j}.skip"), x, KernelShape::new(1, 1, width, f), stride, true)?;
                        acc = Some(b.add(acc, y));
                    }
                    cur = match acc {
                        Some(v) => v,
                        None => {
                            let shape = Shape3::new(c.output.t, c.output.s, f);
                            b.push(Layer::Zeros, shape)
                        }
                    };
                }
                Cell::Output(c) => {
                    let y = b.conv("out", cur, KernelShape::new(1, 1, width, c.classes), Stride::unit(), false)?;
                    let logits = b.push(Layer::Gap { input: y }, Shape3::new(1, 1, c.classes));
                    b.push(Layer::Softmax { input: logits }, Shape3::new(1, 1, c.classes));
                    return Ok(Self {
                        input,
                        classes: c.classes,
                        layers: b.layers,
                        params: b.params,
                        cell_outputs,
                        logits,
                    });
                }
            }
            if cell_outputs.last() != Some(&cur) {
                cell_outputs.push(cur);
            }
        }
        unreachable!("layout always ends with an output cell")
    }

    /// The chosen sub-network of `supernet`, with weights sliced to the
    /// chosen widths.
    pub fn extract(supernet: &SuperNet, desc: &ArchitectureDescriptor) -> Result<Self> {
        Self::build(supernet.layout(), desc, &mut Sliced(supernet.weights()))
    }

    /// The architecture of `desc` with freshly initialized weights.
    pub fn from_descriptor(desc: &ArchitectureDescriptor, seed: u64) -> Result<Self> {
        let layout = SpaceLayout::new(&desc.space_config)?;
        Self::build(&layout, desc, &mut Fresh(ChaCha8Rng::seed_from_u64(seed)))
    }

    /// Same architecture with the given parameter values, which must match
    /// names and shapes of this network's parameters in order.
    pub fn with_params(&self, params: Vec<Param>) -> std::result::Result<Self, TensorError> {
        if params.len() != self.params.len() {
            return Err(TensorError::Invalid {
                op: "with_params",
                msg: format!("expected {} tensors, got {}", self.params.len(), params.len()),
            });
        }
        let mut store = ParamStore::new();
        for (p, mine) in params.into_iter().zip(self.params.iter()) {
            if p.name != mine.name || p.dims != mine.dims || p.value.len() != mine.dims.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "with_params",
                    left: format!("{} {}", mine.name, mine.dims),
                    right: format!("{} {}", p.name, p.dims),
                });
            }
            store.push(p);
        }
        Ok(Self {
            params: store,
            ..self.clone()
        })
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[LayerNode] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn logits(&self) -> ValueId {
        self.logits
    }

    pub fn cell_outputs(&self) -> &[ValueId] {
        &self.cell_outputs
    }

    pub fn value_shape(&self, v: ValueId) -> Shape3 {
        if v.0 == 0 {
            self.input
        } else {
            self.layers[v.0 - 1].output
        }
    }

    /// Geometry of a convolution layer.
    pub fn conv_geometry(&self, layer: &Layer) -> Option<ConvGeometry> {
        match layer {
            Layer::Conv {
                input,
                weight,
                stride,
                padding,
                ..
            } => {
                let Dims::Kernel(k) = self.params.get(*weight).dims else { return None };
                ConvGeometry::new(self.value_shape(*input), k, *stride, *padding).ok()
            }
            _ => None,
        }
    }

    /// Records the forward pass on the tape. With `fake_quant`, weights and
    /// every layer output up to the logits are snapped to their int8 grid.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        x: NodeId,
        options: ForwardOptions,
        rng: &mut R,
    ) -> Result<(NodeId, NodeId)> {
        let quant = |g: &mut Graph, n: NodeId| {
            if options.fake_quant {
                let s = kernels::symmetric_scale(g.value(n));
                g.fake_quant(n, s)
            } else {
                n
            }
        };
        let mut values = vec![quant(g, x)];
        for node in &self.layers {
            let y = match &node.layer {
                Layer::Conv {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                    relu,
                } => {
                    let w = quant(g, params[*weight]);
                    let y = g.conv(values[input.0], w, *stride, *padding)?;
                    let y = g.bias(y, params[*bias])?;
                    let y = if *relu { g.relu(y) } else { y };
                    quant(g, y)
                }
                Layer::Add { a, b } => {
                    let y = g.add(values[a.0], values[b.0])?;
                    quant(g, y)
                }
                Layer::Zeros => g.leaf(vec![0.0; node.output.len()], Dims::Tensor(node.output), false)?,
                Layer::Gap { input } => {
                    let y = g.global_avg_pool(values[input.0])?;
                    quant(g, y)
                }
                Layer::Softmax { input } => g.softmax(values[input.0])?,
            };
            let id = ValueId(values.len());
            let y = if options.training && self.cell_outputs.contains(&id) {
                g.dropout(y, options.dropout_rate, true, rng)?
            } else {
                y
            };
            values.push(y);
        }
        Ok((values[self.logits.0], *values.last().expect("network has layers")))
    }

    pub fn predict(&self, x: &crate::tensor::Tensor3) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xn = g.input(x);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, probs) = self.forward(&mut g, &p, xn, ForwardOptions::default(), &mut rng)?;
        Ok(g.value(probs).to_vec())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ForwardOptions {
    pub training: bool,
    pub dropout_rate: f64,
    pub fake_quant: bool,
}
