use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::group::{COMPUTE, IDENTITY, ON};
use super::layout::{Cell, SensorFusionCell, SpaceLayout, TimeReduceCell, TEMPORAL_KERNELS};
use super::{ArchitectureDescriptor, DecisionGroup, Result, SearchSpaceConfig};
use crate::tensor::{Dims, Graph, KernelShape, NodeId, Padding, Param, ParamStore, Stride, Tensor3};

/// The over-parameterized network: every architecture of the space is a
/// gated sub-graph sharing these weights.
#[derive(Debug, Clone)]
pub struct SuperNet {
    layout: SpaceLayout,
    weights: ParamStore,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Pre-softmax class scores, shape `(1, 1, classes)`.
    pub logits: NodeId,
    pub probs: NodeId,
}

fn conv_params<R: Rng>(store: &mut ParamStore, name: &str, kernel: KernelShape, rng: &mut R) {
    let fan_in = kernel.kt * kernel.ks * kernel.f_in;
    store.push(Param::fan_in_uniform(format!("{name}.weight"), Dims::Kernel(kernel), fan_in, rng));
    store.push(Param::zeros(format!("{name}.bias"), Dims::vector(kernel.f_out)));
}

impl SuperNet {
    /// Builds the space and initializes weights from `seed`.
    pub fn new(config: &SearchSpaceConfig, seed: u64) -> Result<Self> {
        let layout = SpaceLayout::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = ParamStore::new();
        for cell in layout.cells() {
            match cell {
                Cell::TimeReduce(c) => {
                    for k in TEMPORAL_KERNELS {
                        let shape = KernelShape::new(k, 1, c.input.f, c.output.f);
                        conv_params(&mut weights, &format!("tr{}.k{k}", c.index), shape, &mut rng);
                    }
                }
                Cell::SensorFusion(c) => {
                    let (f_in, f) = (c.input.f, c.output.f);
                    let j = c.index;
                    conv_params(&mut weights, &format!("sf{j}.cross"), KernelShape::new(1, c.input.s, f_in, f), &mut rng);
                    for k in TEMPORAL_KERNELS {
                        conv_params(&mut weights, &format!("sf{j}.k{k}"), KernelShape::new(k, 1, f, f), &mut rng);
                    }
                    conv_params(&mut weights, &format!("sf{j}.skip"), KernelShape::new(1, 1, f_in, f), &mut rng);
                }
                Cell::Output(c) => {
                    conv_params(&mut weights, "out", KernelShape::new(1, 1, c.input.f, c.classes), &mut rng);
                }
            }
        }
        Ok(Self { layout, weights })
    }

    pub fn layout(&self) -> &SpaceLayout {
        &self.layout
    }

    pub fn config(&self) -> &SearchSpaceConfig {
        self.layout.config()
    }

    pub fn groups(&self) -> &[DecisionGroup] {
        self.layout.groups()
    }

    pub fn groups_mut(&mut self) -> &mut [DecisionGroup] {
        self.layout.groups_mut()
    }

    pub fn weights(&self) -> &ParamStore {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut ParamStore {
        &mut self.weights
    }

    /// Per group, the argmax of its logits.
    pub fn discretize(&self) -> ArchitectureDescriptor {
        let choices: Vec<usize> = self.groups().iter().map(DecisionGroup::choice).collect();
        self.layout.descriptor(&choices)
    }

    /// Records the relaxed forward pass. `weights` come from
    /// [`ParamStore::bind`]; `relaxed` holds one simplex vector per group.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        weights: &[NodeId],
        relaxed: &[NodeId],
        x: NodeId,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        Ok(self.forward_cells(g, weights, relaxed, x, training, rng)?.1)
    }

    /// Like [`SuperNet::forward`], also returning every searchable cell's
    /// output before dropout.
    pub fn forward_cells<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        weights: &[NodeId],
        relaxed: &[NodeId],
        x: NodeId,
        training: bool,
        rng: &mut R,
    ) -> Result<(Vec<NodeId>, ForwardOutput)> {
        let rate = self.config().dropout_rate;
        let mut h = x;
        let mut outs = Vec::new();
        for cell in self.layout.cells() {
            h = match cell {
                Cell::TimeReduce(c) => self.time_reduce(g, weights, relaxed, c, h)?,
                Cell::SensorFusion(c) => self.sensor_fusion(g, weights, relaxed, c, h)?,
                Cell::Output(_) => return Ok((outs, self.output(g, weights, h)?)),
            };
            outs.push(h);
            h = g.dropout(h, rate, training, rng)?;
        }
        unreachable!("layout always ends with an output cell")
    }

    /// Evaluation-mode class probabilities under fixed relaxed vectors.
    pub fn predict(&self, x: &Tensor3, relaxed: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let w = self.weights.bind(&mut g, false);
        let a: Vec<NodeId> = relaxed.iter().map(|v| g.constant(v.clone())).collect();
        let xn = g.input(x);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, &w, &a, xn, false, &mut rng)?;
        Ok(g.value(out.probs).to_vec())
    }

    /// Probabilities of the discretized architecture inside the supernet.
    pub fn predict_one_hot(&self, x: &Tensor3, desc: &ArchitectureDescriptor) -> Result<Vec<f64>> {
        let relaxed = self.layout.one_hot(desc)?;
        self.predict(x, &relaxed)
    }

    fn param(&self, weights: &[NodeId], name: &str) -> NodeId {
        let id = self
            .weights
            .id_of(name)
            .unwrap_or_else(|| panic!("supernet has no parameter {name}"));
        weights[id]
    }

    fn conv_relu(
        &self,
        g: &mut Graph,
        weights: &[NodeId],
        name: &str,
        x: NodeId,
        stride: Stride,
    ) -> Result<NodeId> {
        let w = self.param(weights, &format!("{name}.weight"));
        let b = self.param(weights, &format!("{name}.bias"));
        let y = g.conv(x, w, stride, Padding::Same)?;
        let y = g.bias(y, b)?;
        Ok(g.relu(y))
    }

    fn time_reduce(
        &self,
        g: &mut Graph,
        weights: &[NodeId],
        relaxed: &[NodeId],
        c: &TimeReduceCell,
        x: NodeId,
    ) -> Result<NodeId> {
        let a_kernel = relaxed[c.kernel_group];
        let mut paths = Vec::new();
        for (idx, k) in TEMPORAL_KERNELS.iter().enumerate() {
            if inactive(g, a_kernel, idx) {
                continue;
            }
            let y = self.conv_relu(g, weights, &format!("tr{}.k{k}", c.index), x, Stride::new(2, 1))?;
            paths.push(g.scale(y, a_kernel, idx)?);
        }
        let mixed = g.sum(&paths)?;
        let counts = self.groups()[c.filter_group].filter_options().expect("filter group");
        let mask = g.prefix_mask(relaxed[c.filter_group], counts, c.output.f)?;
        Ok(g.channel_mask(mixed, mask)?)
    }

    fn sensor_fusion(
        &self,
        g: &mut Graph,
        weights: &[NodeId],
        relaxed: &[NodeId],
        c: &SensorFusionCell,
        x: NodeId,
    ) -> Result<NodeId> {
        let j = c.index;
        let identity = c.identity.map(|id| relaxed[id]);
        if let Some(a) = identity {
            if inactive(g, a, COMPUTE) {
                return Ok(x);
            }
        }
        let groups = self.groups();
        let stride = Stride::new(1, c.stride);

        let cross = self.conv_relu(g, weights, &format!("sf{j}.cross"), x, stride)?;
        let cross_counts = groups[c.cross_filters].filter_options().expect("filter group");
        let cross_mask = g.prefix_mask(relaxed[c.cross_filters], cross_counts, c.output.f)?;
        let cross = g.channel_mask(cross, cross_mask)?;

        let mut paths = Vec::new();
        for (gate, k) in c.branches.iter().zip(TEMPORAL_KERNELS) {
            let a = relaxed[*gate];
            if inactive(g, a, ON) {
                continue;
            }
            let y = self.conv_relu(g, weights, &format!("sf{j}.k{k}"), cross, Stride::unit())?;
            paths.push(g.scale(y, a, ON)?);
        }
        let a_skip = relaxed[c.skip];
        if !inactive(g, a_skip, ON) {
            let y = self.conv_relu(g, weights, &format!("sf{j}.skip"), x, stride)?;
            paths.push(g.scale(y, a_skip, ON)?);
        }
        let computed = if paths.is_empty() {
            g.leaf(vec![0.0; c.output.len()], Dims::Tensor(c.output), false)?
        } else {
            let sum = g.sum(&paths)?;
            let counts = groups[c.filters].filter_options().expect("filter group");
            let mask = g.prefix_mask(relaxed[c.filters], counts, c.output.f)?;
            g.channel_mask(sum, mask)?
        };

        match identity {
            Some(a) => {
                let keep = g.scale(x, a, IDENTITY)?;
                let comp = g.scale(computed, a, COMPUTE)?;
                Ok(g.add(keep, comp)?)
            }
            None => Ok(computed),
        }
    }

    fn output(&self, g: &mut Graph, weights: &[NodeId], x: NodeId) -> Result<ForwardOutput> {
        let w = self.param(weights, "out.weight");
        let b = self.param(weights, "out.bias");
        let y = g.conv(x, w, Stride::unit(), Padding::Same)?;
        let y = g.bias(y, b)?;
        let logits = g.global_avg_pool(y)?;
        let probs = g.softmax(logits)?;
        Ok(ForwardOutput { logits, probs })
    }

    /// Relaxed constants selecting `desc`; convenience for one-hot evaluation.
    pub fn one_hot(&self, desc: &ArchitectureDescriptor) -> Result<Vec<Vec<f64>>> {
        self.layout.one_hot(desc)
    }

    /// Uniform relaxed vectors for every group.
    pub fn uniform(&self) -> Vec<Vec<f64>> {
        self.groups()
            .iter()
            .map(|grp| vec![1.0 / grp.len() as f64; grp.len()])
            .collect()
    }
}

/// A path weighted by an exact-zero constant contributes nothing and needs
/// no gradient, so it is not recorded.
fn inactive(g: &Graph, alpha: NodeId, idx: usize) -> bool {
    !g.requires_grad(alpha) && g.value(alpha)[idx] == 0.0
}
