use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::group::{one_hot, DecisionGroup, GroupRole};
use super::{ArchitectureDescriptor, Result, SearchSpaceConfig, SpaceError};
use crate::tensor::Shape3;

pub const TEMPORAL_KERNELS: [usize; 3] = [3, 5, 7];

/// Tensor shapes below are at maximum filter width; `in_options` lists the
/// filter counts the incoming tensor can take.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeReduceCell {
    pub index: usize,
    pub input: Shape3,
    pub output: Shape3,
    pub in_options: Vec<usize>,
    pub kernel_group: usize,
    pub filter_group: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorFusionCell {
    pub index: usize,
    pub stride: usize,
    pub input: Shape3,
    pub output: Shape3,
    pub in_options: Vec<usize>,
    /// Gate of the pointwise skip convolution.
    pub skip: usize,
    /// Gates of the temporal convolutions, in [`TEMPORAL_KERNELS`] order.
    pub branches: [usize; 3],
    /// Filter count of the cross-channel convolution.
    pub cross_filters: usize,
    /// Filter count shared by the temporal branches and the skip.
    pub filters: usize,
    /// Present only when input and output shapes can coincide.
    pub identity: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputCell {
    pub input: Shape3,
    pub in_options: Vec<usize>,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    TimeReduce(TimeReduceCell),
    SensorFusion(SensorFusionCell),
    Output(OutputCell),
}

/// Cells and decision groups of a search space, without weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceLayout {
    config: SearchSpaceConfig,
    cells: Vec<Cell>,
    groups: Vec<DecisionGroup>,
    index: HashMap<String, usize>,
}

impl SpaceLayout {
    pub fn new(config: &SearchSpaceConfig) -> Result<Self> {
        config.validate()?;
        let mut groups = Vec::new();
        let mut add = |id: String, role: GroupRole| {
            groups.push(DecisionGroup::new(id, role));
            groups.len() - 1
        };
        let mut cells = Vec::new();
        let mut shape = Shape3::new(config.ts_l, config.ts_s, 1);
        let mut options = vec![1];

        let tr_opts = config.tr_filter_options();
        for i in 0..config.num_time_reduce_cells() {
            let kernel_group = add(format!("tr{i}.kernel"), GroupRole::Kernel(TEMPORAL_KERNELS.to_vec()));
            let filter_group = add(format!("tr{i}.filters"), GroupRole::Filters(tr_opts.clone()));
            let output = Shape3::new(shape.t.div_ceil(2), shape.s, config.f_max_tr);
            cells.push(Cell::TimeReduce(TimeReduceCell {
                index: i,
                input: shape,
                output,
                in_options: options.clone(),
                kernel_group,
                filter_group,
            }));
            shape = output;
            options = tr_opts.clone();
        }

        let sf_opts = config.sf_filter_options();
        for (j, stride) in config.sensor_fusion_strides().into_iter().enumerate() {
            let skip = add(format!("sf{j}.skip"), GroupRole::Gate);
            let branches = TEMPORAL_KERNELS.map(|k| add(format!("sf{j}.k{k}"), GroupRole::Gate));
            let cross_filters = add(format!("sf{j}.cross_filters"), GroupRole::Filters(sf_opts.clone()));
            let filters = add(format!("sf{j}.filters"), GroupRole::Filters(sf_opts.clone()));
            let identity = (stride == 1 && options == sf_opts).then(|| add(format!("sf{j}.identity"), GroupRole::Identity));
            let output = Shape3::new(shape.t, shape.s.div_ceil(stride), config.f_max_sf);
            cells.push(Cell::SensorFusion(SensorFusionCell {
                index: j,
                stride,
                input: shape,
                output,
                in_options: options.clone(),
                skip,
                branches,
                cross_filters,
                filters,
                identity,
            }));
            shape = output;
            options = sf_opts.clone();
        }

        cells.push(Cell::Output(OutputCell {
            input: shape,
            in_options: options,
            classes: config.num_classes,
        }));
        let index = groups.iter().enumerate().map(|(i, g)| (g.id.clone(), i)).collect();
        Ok(Self {
            config: config.clone(),
            cells,
            groups,
            index,
        })
    }

    pub fn config(&self) -> &SearchSpaceConfig {
        &self.config
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn groups(&self) -> &[DecisionGroup] {
        &self.groups
    }

    pub(crate) fn groups_mut(&mut self) -> &mut [DecisionGroup] {
        &mut self.groups
    }

    pub fn group_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn input_shape(&self) -> Shape3 {
        Shape3::new(self.config.ts_l, self.config.ts_s, 1)
    }

    /// Choice per group in registry order, after checking the descriptor
    /// covers exactly this space.
    pub fn resolve(&self, desc: &ArchitectureDescriptor) -> Result<Vec<usize>> {
        if desc.space_config != self.config {
            return Err(SpaceError::DescriptorMismatch("space configs differ".into()));
        }
        if let Some(extra) = desc.choices.keys().find(|k| !self.index.contains_key(*k)) {
            return Err(SpaceError::DescriptorMismatch(format!("unknown group {extra}")));
        }
        self.groups
            .iter()
            .map(|g| match desc.choices.get(&g.id) {
                Some(&c) if c < g.len() => Ok(c),
                Some(&c) => Err(SpaceError::DescriptorMismatch(format!(
                    "group {} has {} options, got choice {c}",
                    g.id,
                    g.len()
                ))),
                None => Err(SpaceError::DescriptorMismatch(format!("missing group {}", g.id))),
            })
            .collect()
    }

    pub fn descriptor(&self, choices: &[usize]) -> ArchitectureDescriptor {
        assert_eq!(choices.len(), self.groups.len(), "one choice per group");
        let choices: BTreeMap<String, usize> = self
            .groups
            .iter()
            .zip(choices)
            .map(|(g, &c)| (g.id.clone(), c))
            .collect();
        ArchitectureDescriptor::new(self.config.clone(), choices)
    }

    pub fn random_descriptor<R: Rng + ?Sized>(&self, rng: &mut R) -> ArchitectureDescriptor {
        let choices: Vec<usize> = self.groups.iter().map(|g| rng.random_range(0..g.len())).collect();
        self.descriptor(&choices)
    }

    /// One-hot relaxed vectors for every group.
    pub fn one_hot(&self, desc: &ArchitectureDescriptor) -> Result<Vec<Vec<f64>>> {
        let choices = self.resolve(desc)?;
        Ok(self
            .groups
            .iter()
            .zip(choices)
            .map(|(g, c)| one_hot(g.len(), c))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uci_har_sized_space_has_three_time_reduce_cells() {
        let layout = SpaceLayout::new(&SearchSpaceConfig::new(128, 9, 6)).unwrap();
        let kinds: Vec<_> = layout
            .cells()
            .iter()
            .map(|c| match c {
                Cell::TimeReduce(_) => 'T',
                Cell::SensorFusion(_) => 'S',
                Cell::Output(_) => 'O',
            })
            .collect();
        assert_eq!(kinds, vec!['T', 'T', 'T', 'O']);
        let Cell::Output(out) = layout.cells().last().unwrap() else { panic!() };
        assert_eq!(out.input, Shape3::new(16, 9, 16));
    }

    #[test]
    fn skoda_sized_space_layout() {
        let layout = SpaceLayout::new(&SearchSpaceConfig::new(64, 30, 10)).unwrap();
        let sf: Vec<&SensorFusionCell> = layout
            .cells()
            .iter()
            .filter_map(|c| match c {
                Cell::SensorFusion(s) => Some(s),
                _ => None,
            })
            .collect();
        assert_eq!(sf.len(), 6);
        assert_eq!(sf.iter().filter(|c| c.stride == 2).count(), 2);
        let sensors: Vec<usize> = sf.iter().map(|c| c.output.s).collect();
        assert_eq!(sensors, vec![30, 30, 15, 15, 15, 8]);
        // The first cell follows a Time-Reduce cell with a different filter grid.
        let identities: Vec<bool> = sf.iter().map(|c| c.identity.is_some()).collect();
        assert_eq!(identities, vec![false, true, false, true, true, false]);
        // tr0, tr1: 4 groups; sf0: 6 groups; sf1 ends with its identity group.
        assert_eq!(layout.group_index("sf1.identity"), Some(16));
    }

    #[test]
    fn builds_are_deterministic() {
        let cfg = SearchSpaceConfig::new(64, 30, 10);
        let a = SpaceLayout::new(&cfg).unwrap();
        let b = SpaceLayout::new(&cfg).unwrap();
        assert_eq!(a.groups(), b.groups());
    }
}
