//! Hardware-aware differentiable search: Gumbel-Softmax relaxation of the
//! decision groups, hinge-log hardware losses and alternating first-order
//! updates of architecture logits and weights.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::WindowedDataset;
use crate::hwcost::{HardwareEstimate, HardwareModel, HardwareNodes, HwError};
use crate::space::{ArchitectureDescriptor, SpaceError, SuperNet};
use crate::tensor::{Adam, Dims, Graph, NodeId, Optimizer, TensorError};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: &'static str },
    #[error(transparent)]
    Hw(#[from] HwError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SearchError>;

fn default_gamma_lat() -> f64 {
    2.0
}
fn default_gamma_mem() -> f64 {
    4.0
}
fn default_tau0() -> f64 {
    1.0
}
fn default_epsilon() -> f64 {
    0.995
}
fn default_eta_alpha() -> f64 {
    3e-3
}
fn default_eta_w() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    20
}
fn default_batch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Latency budget; `None` disables the latency loss.
    pub lat_target_ms: Option<f64>,
    /// Peak-memory budget; `None` disables the memory loss.
    pub mem_target_bytes: Option<f64>,
    #[serde(default = "default_gamma_lat")]
    pub gamma_lat: f64,
    #[serde(default = "default_gamma_mem")]
    pub gamma_mem: f64,
    #[serde(default = "default_tau0")]
    pub tau0: f64,
    /// Temperature decay per step.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Learning rate of the architecture logits.
    #[serde(default = "default_eta_alpha")]
    pub eta_alpha: f64,
    /// Learning rate of the weights.
    #[serde(default = "default_eta_w")]
    pub eta_w: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            lat_target_ms: None,
            mem_target_bytes: None,
            gamma_lat: default_gamma_lat(),
            gamma_mem: default_gamma_mem(),
            tau0: default_tau0(),
            epsilon: default_epsilon(),
            eta_alpha: default_eta_alpha(),
            eta_w: default_eta_w(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SearchError::Config(m));
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon {} must lie in (0, 1)", self.epsilon));
        }
        if !(self.tau0 > 0.0) {
            return bad(format!("tau0 {} must be positive", self.tau0));
        }
        for (name, t) in [("lat_target_ms", self.lat_target_ms), ("mem_target_bytes", self.mem_target_bytes)] {
            if t.is_some_and(|t| !(t > 0.0)) {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.gamma_lat < 0.0 || self.gamma_mem < 0.0 || self.eta_alpha < 0.0 || self.eta_w < 0.0 {
            return bad("gammas and learning rates must be nonnegative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }

    /// Temperature after `steps` anneal steps.
    pub fn tau_after(&self, steps: usize) -> f64 {
        let mut tau = self.tau0;
        for _ in 0..steps {
            tau *= self.epsilon;
        }
        tau
    }
}

/// Seeded stream of standard Gumbel samples.
#[derive(Debug, Clone)]
pub struct GumbelNoise {
    rng: ChaCha8Rng,
}

impl GumbelNoise {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn sample(&mut self) -> f64 {
        let u: f64 = self.rng.random_range(f64::MIN_POSITIVE..1.0);
        -(-u.ln()).ln()
    }

    /// One sample per entry of every group.
    pub fn sample_groups(&mut self, sizes: &[usize]) -> Vec<Vec<f64>> {
        sizes.iter().map(|&n| (0..n).map(|_| self.sample()).collect()).collect()
    }
}

/// `softmax((α + noise) / τ)`; plain tempered softmax without noise.
pub fn pseudo_prob(g: &mut Graph, logits: NodeId, tau: f64, noise: Option<&[f64]>) -> Result<NodeId> {
    Ok(g.tempered_softmax(logits, noise, tau)?)
}

/// `γ·ln(value / target)` when `value >= target`, else 0.
pub fn hardware_loss(g: &mut Graph, value: NodeId, target: f64, gamma: f64) -> Result<NodeId> {
    Ok(g.hinge_log(value, target, gamma)?)
}

/// Closed form of [`hardware_loss`].
pub fn hardware_loss_value(value: f64, target: f64, gamma: f64) -> f64 {
    if value >= target {
        gamma * (value / target).ln()
    } else {
        0.0
    }
}

/// Hardware part of the objective; returns `(loss_lat, loss_mem)` nodes,
/// constant zero for disabled terms.
pub fn hardware_losses(g: &mut Graph, hw: HardwareNodes, config: &SearchConfig) -> Result<(NodeId, NodeId)> {
    let lat = match config.lat_target_ms {
        Some(t) => hardware_loss(g, hw.latency, t, config.gamma_lat)?,
        None => g.constant(vec![0.0]),
    };
    let mem = match config.mem_target_bytes {
        Some(t) => hardware_loss(g, hw.peak_mem, t, config.gamma_mem)?,
        None => g.constant(vec![0.0]),
    };
    Ok((lat, mem))
}

/// `loss_val + loss_lat + loss_mem`.
pub fn total_loss(g: &mut Graph, loss_val: NodeId, hw: HardwareNodes, config: &SearchConfig) -> Result<NodeId> {
    let (lat, mem) = hardware_losses(g, hw, config)?;
    Ok(g.sum(&[loss_val, lat, mem])?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub tau: f64,
    pub loss_val: f64,
    pub loss_lat: f64,
    pub loss_mem: f64,
    pub est_latency_ms: f64,
    pub est_peak_mem_bytes: f64,
}

pub const TRACE_HEADER: &str = "step,epoch,tau,loss_val,loss_lat,loss_mem,est_latency_ms,est_peak_mem_bytes";

pub fn write_trace<W: Write>(mut w: W, rows: &[TraceRow]) -> std::io::Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.step, r.epoch, r.tau, r.loss_val, r.loss_lat, r.loss_mem, r.est_latency_ms, r.est_peak_mem_bytes
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub descriptor: ArchitectureDescriptor,
    /// Exact cost of the discretized architecture.
    pub estimate: HardwareEstimate,
    pub trace: Vec<TraceRow>,
    pub final_tau: f64,
    pub supernet: SuperNet,
}

impl SearchOutcome {
    pub fn meets(&self, config: &SearchConfig) -> bool {
        config.lat_target_ms.is_none_or(|t| self.estimate.latency_ms <= t)
            && config.mem_target_bytes.is_none_or(|t| self.estimate.peak_mem_bytes <= t)
    }
}

/// Statistics of one architecture step.
#[derive(Debug, Clone, Copy)]
pub struct AlphaStats {
    pub loss_val: f64,
    pub loss_lat: f64,
    pub loss_mem: f64,
}

/// Hash of a sequence of floats by bit pattern.
pub fn fingerprint<'a>(values: impl IntoIterator<Item = &'a f64>) -> u64 {
    let mut h = DefaultHasher::new();
    for v in values {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Stable seed mixing (splitmix64 over the parts).
pub(crate) fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(seed), |h, p| mix(h ^ mix(*p)))
}

/// The alternating optimization, one step at a time.
pub struct Searcher<'a> {
    net: SuperNet,
    hw: &'a HardwareModel,
    data: &'a WindowedDataset,
    config: SearchConfig,
    tau: f64,
    steps: usize,
    alpha_opt: Adam,
    w_opt: Adam,
    noise: GumbelNoise,
}

impl<'a> Searcher<'a> {
    pub fn new(net: SuperNet, hw: &'a HardwareModel, data: &'a WindowedDataset, config: SearchConfig) -> Result<Self> {
        config.validate()?;
        if data.train_indices().is_empty() {
            return Err(SearchError::EmptySplit("train"));
        }
        if data.val_indices().is_empty() {
            return Err(SearchError::EmptySplit("validation"));
        }
        if net.layout() != hw.layout() {
            return Err(SearchError::Config("hardware model was built for another space".into()));
        }
        Ok(Self {
            hw,
            data,
            tau: config.tau0,
            steps: 0,
            alpha_opt: Adam::new(config.eta_alpha),
            w_opt: Adam::new(config.eta_w),
            noise: GumbelNoise::new(derive_seed(config.seed, &[0])),
            net,
            config,
        })
    }

    pub fn supernet(&self) -> &SuperNet {
        &self.net
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha_fingerprint(&self) -> u64 {
        fingerprint(self.net.groups().iter().flat_map(|g| g.logits.iter()))
    }

    pub fn weight_fingerprint(&self) -> u64 {
        fingerprint(self.net.weights().iter().flat_map(|p| p.value.iter()))
    }

    fn group_sizes(&self) -> Vec<usize> {
        self.net.groups().iter().map(|g| g.len()).collect()
    }

    /// Relaxed vectors from the logits with optional noise; `grad` makes
    /// the logits differentiable leaves.
    fn relax(&self, g: &mut Graph, noise: Option<&[Vec<f64>]>, grad: bool) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
        let mut leaves = Vec::new();
        let mut relaxed = Vec::new();
        for (i, grp) in self.net.groups().iter().enumerate() {
            let l = g.leaf(grp.logits.clone(), Dims::vector(grp.len()), grad)?;
            relaxed.push(pseudo_prob(g, l, self.tau, noise.map(|n| n[i].as_slice()))?);
            leaves.push(l);
        }
        Ok((leaves, relaxed))
    }

    /// Mean cross-entropy over `batch` and its gradients w.r.t. the logits
    /// (`alpha`) or the weights. Samples run in parallel; results are
    /// reduced in batch order.
    fn batch_grads(&self, batch: &[usize], noise: &[Vec<f64>], alpha: bool, phase: u64) -> Result<(f64, Vec<Vec<f64>>)> {
        let per_sample: Vec<Result<(f64, Vec<Vec<f64>>)>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, &idx)| {
                let (x, label) = self.data.sample(idx);
                let mut g = Graph::new();
                let w = self.net.weights().bind(&mut g, !alpha);
                let (leaves, relaxed) = self.relax(&mut g, Some(noise), alpha)?;
                let xn = g.input(x);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[phase, self.steps as u64, i as u64]));
                let out = self.net.forward(&mut g, &w, &relaxed, xn, true, &mut rng)?;
                let loss = g.softmax_cross_entropy(out.logits, label)?;
                let grads = g.backward(loss)?;
                let targets = if alpha { &leaves } else { &w };
                let gv = targets
                    .iter()
                    .map(|n| grads.get(*n).map_or_else(|| vec![0.0; g.dims(*n).len()], <[f64]>::to_vec))
                    .collect();
                Ok((g.scalar(loss), gv))
            })
            .collect();
        let mut total = 0.0;
        let mut acc: Option<Vec<Vec<f64>>> = None;
        for r in per_sample {
            let (l, gv) = r?;
            total += l;
            match &mut acc {
                None => acc = Some(gv),
                Some(a) => a.iter_mut().zip(&gv).for_each(|(x, y)| x.iter_mut().zip(y).for_each(|(p, q)| *p += q)),
            }
        }
        let n = batch.len() as f64;
        let mut acc = acc.unwrap_or_default();
        acc.iter_mut().flatten().for_each(|v| *v /= n);
        Ok((total / n, acc))
    }

    /// Architecture step on a validation batch against the full objective;
    /// weights untouched.
    pub fn alpha_step(&mut self, batch: &[usize]) -> Result<AlphaStats> {
        let noise = self.noise.sample_groups(&self.group_sizes());
        let (loss_val, mut grads) = self.batch_grads(batch, &noise, true, 1)?;
        let mut g = Graph::new();
        let (leaves, relaxed) = self.relax(&mut g, Some(&noise), true)?;
        let hw = self.hw.estimate(&mut g, &relaxed)?;
        let (lat, mem) = hardware_losses(&mut g, hw, &self.config)?;
        let hw_loss = g.add(lat, mem)?;
        let (loss_lat, loss_mem) = (g.scalar(lat), g.scalar(mem));
        for (v, what) in [(loss_val, "validation loss"), (loss_lat, "latency loss"), (loss_mem, "memory loss")] {
            if !v.is_finite() {
                return Err(SearchError::NonFinite { step: self.steps, what });
            }
        }
        let hw_grads = g.backward(hw_loss)?;
        for (acc, leaf) in grads.iter_mut().zip(&leaves) {
            if let Some(d) = hw_grads.get(*leaf) {
                acc.iter_mut().zip(d).for_each(|(a, b)| *a += b);
            }
        }
        let mut params: Vec<&mut [f64]> = self.net.groups_mut().iter_mut().map(|g| g.logits.as_mut_slice()).collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        self.alpha_opt.step(&mut params, &grad_refs);
        Ok(AlphaStats {
            loss_val,
            loss_lat,
            loss_mem,
        })
    }

    /// Weight step on a training batch with cross-entropy only; logits
    /// untouched. Returns the mean training loss.
    pub fn weight_step(&mut self, batch: &[usize]) -> Result<f64> {
        let noise = self.noise.sample_groups(&self.group_sizes());
        let (loss, grads) = self.batch_grads(batch, &noise, false, 2)?;
        if !loss.is_finite() {
            return Err(SearchError::NonFinite {
                step: self.steps,
                what: "training loss",
            });
        }
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        self.w_opt.step(&mut self.net.weights_mut().values_mut(), &grad_refs);
        Ok(loss)
    }

    pub fn anneal(&mut self) {
        self.tau *= self.config.epsilon;
        self.steps += 1;
    }

    /// Noise-free relaxed estimate at the current temperature.
    pub fn relaxed_estimate(&self) -> Result<HardwareEstimate> {
        let mut g = Graph::new();
        let (_, relaxed) = self.relax(&mut g, None, false)?;
        let hw = self.hw.estimate(&mut g, &relaxed)?;
        Ok(HardwareEstimate {
            latency_ms: g.scalar(hw.latency),
            peak_mem_bytes: g.scalar(hw.peak_mem),
        })
    }

    /// All epochs, then discretization.
    pub fn run(mut self) -> Result<SearchOutcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[3]));
        let bs = self.config.batch_size;
        let mut trace = Vec::new();
        let mut val_pos = 0;
        let mut val: Vec<usize> = self.data.val_indices().to_vec();
        for epoch in 0..self.config.epochs {
            let mut train: Vec<usize> = self.data.train_indices().to_vec();
            train.shuffle(&mut rng);
            for chunk in train.chunks(bs) {
                if val_pos == 0 {
                    val.shuffle(&mut rng);
                }
                let take = bs.min(val.len());
                let vb: Vec<usize> = (0..take).map(|i| val[(val_pos + i) % val.len()]).collect();
                val_pos = (val_pos + take) % val.len();
                let tau = self.tau;
                let stats = self.alpha_step(&vb)?;
                self.weight_step(chunk)?;
                let est = self.relaxed_estimate()?;
                trace.push(TraceRow {
                    step: self.steps,
                    epoch,
                    tau,
                    loss_val: stats.loss_val,
                    loss_lat: stats.loss_lat,
                    loss_mem: stats.loss_mem,
                    est_latency_ms: est.latency_ms,
                    est_peak_mem_bytes: est.peak_mem_bytes,
                });
                self.anneal();
            }
        }
        let descriptor = self.net.discretize();
        let estimate = self.hw.estimate_descriptor(&descriptor)?;
        Ok(SearchOutcome {
            descriptor,
            estimate,
            trace,
            final_tau: self.tau,
            supernet: self.net,
        })
    }
}

/// Runs the full search.
pub fn search(net: SuperNet, data: &WindowedDataset, hw: &HardwareModel, config: &SearchConfig) -> Result<SearchOutcome> {
    Searcher::new(net, hw, data, config.clone())?.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hinge_closed_form() {
        assert_eq!(hardware_loss_value(100.0, 200.0, 2.0), 0.0);
        assert!((hardware_loss_value(400.0, 200.0, 2.0) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(hardware_loss_value(200.0, 200.0, 2.0), 0.0);
    }

    #[test]
    fn tau_schedule() {
        let cfg = SearchConfig::default();
        let tau = cfg.tau_after(1000);
        assert!((tau - 0.995f64.powi(1000)).abs() / tau < 1e-12);
        assert!((tau - 6.654e-3).abs() < 1e-5);
    }

    #[test]
    fn gumbel_stream_is_seeded() {
        let a = GumbelNoise::new(4).sample_groups(&[2, 3]);
        let b = GumbelNoise::new(4).sample_groups(&[2, 3]);
        assert_eq!(a, b);
        assert_ne!(a, GumbelNoise::new(5).sample_groups(&[2, 3]));
    }

    #[test]
    fn config_rejects_bad_epsilon() {
        let cfg = SearchConfig {
            epsilon: 1.0,
            ..SearchConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
