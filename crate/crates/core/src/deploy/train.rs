use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::interp::{interpret, Replay};
use super::metrics::{argmax, classification_metrics, Metrics};
use super::quant::{quantize_int8, QuantizedNetwork};
use super::{DeployError, Result};
use crate::data::{Normalization, WindowedDataset};
use crate::dnas::derive_seed;
use crate::space::{ArchitectureDescriptor, ForwardOptions, Network};
use crate::tensor::{Adam, Graph, Optimizer, Tensor3};

fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    3e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Adam step size.
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fake_quant: bool,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            seed: 0,
            fake_quant: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub fake_quant: bool,
    /// Epoch of the returned checkpoint, counted from 1.
    pub best_epoch: usize,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub descriptor: ArchitectureDescriptor,
    pub network: Network,
    pub quant: Option<QuantizedNetwork>,
    /// Input statistics the windows were normalized with.
    pub normalization: Option<Normalization>,
    pub metadata: TrainingMetadata,
}

impl TrainedModel {
    /// Calibrates on `calibration` and attaches int8 parameters.
    pub fn quantize(&mut self, calibration: &[Tensor3]) -> Result<()> {
        self.quant = Some(quantize_int8(&self.network, calibration)?);
        Ok(())
    }

    /// Class probabilities, in int8 when `int8` is set.
    pub fn predict(&self, x: &Tensor3, int8: bool) -> Result<Vec<f64>> {
        let quant = if int8 {
            Some(self.quant.as_ref().ok_or_else(|| DeployError::Input("model has no int8 parameters".into()))?)
        } else {
            None
        };
        Ok(interpret(&self.network, quant, x, Replay::None)?.probs)
    }
}

/// Mean cross-entropy and predictions over `samples`, evaluated on the tape.
fn tape_eval(net: &Network, samples: &[(&Tensor3, usize)], fake_quant: bool) -> Result<(f64, Vec<usize>)> {
    let per: Vec<Result<(f64, usize)>> = samples
        .par_iter()
        .map(|(x, y)| {
            let mut g = Graph::new();
            let p = net.params().bind(&mut g, false);
            let xn = g.input(x);
            let opts = ForwardOptions {
                fake_quant,
                ..ForwardOptions::default()
            };
            let (logits, probs) = net.forward(&mut g, &p, xn, opts, &mut ChaCha8Rng::seed_from_u64(0))?;
            let loss = g.softmax_cross_entropy(logits, *y)?;
            Ok((g.scalar(loss), argmax(g.value(probs))))
        })
        .collect();
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(samples.len());
    for r in per {
        let (l, p) = r?;
        total += l;
        preds.push(p);
    }
    Ok((total / samples.len() as f64, preds))
}

fn rounded(net: &Network) -> Network {
    let mut out = net.clone();
    for v in out.params_mut().values_mut() {
        v.iter_mut().for_each(|x| *x = f64::from(*x as f32));
    }
    out
}

/// Trains the architecture of `descriptor` from a fresh fan-in uniform
/// initialization and returns the checkpoint with the best validation
/// accuracy (ties: lower validation loss). Checkpoint parameters are
/// rounded to f32 so model files reproduce them exactly.
pub fn retrain(descriptor: &ArchitectureDescriptor, data: &WindowedDataset, config: &RetrainConfig) -> Result<TrainedModel> {
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(DeployError::Input("batch_size and learning_rate must be positive".into()));
    }
    let mut net = Network::from_descriptor(descriptor, derive_seed(config.seed, &[10]))?;
    if net.input_shape() != data.window_shape() || net.classes() != data.num_classes() {
        return Err(DeployError::Input(format!(
            "descriptor expects {} windows and {} classes, dataset has {} and {}",
            net.input_shape(),
            net.classes(),
            data.window_shape(),
            data.num_classes()
        )));
    }
    let train = data.train_indices().to_vec();
    let val = data.val();
    if train.is_empty() || val.is_empty() {
        return Err(DeployError::Input("train and validation splits must be non-empty".into()));
    }
    let dropout_rate = descriptor.space_config.dropout_rate;
    let mut opt = Adam::new(config.learning_rate);
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[11]));
    let mut best: Option<(Network, TrainingMetadata)> = None;
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let mut order = train.clone();
        order.shuffle(&mut order_rng);
        for batch in order.chunks(config.batch_size) {
            let per: Vec<Result<(f64, Vec<Vec<f64>>)>> = batch
                .par_iter()
                .enumerate()
                .map(|(i, &idx)| {
                    let (x, y) = data.sample(idx);
                    let mut g = Graph::new();
                    let p = net.params().bind(&mut g, true);
                    let xn = g.input(x);
                    let opts = ForwardOptions {
                        training: true,
                        dropout_rate,
                        fake_quant: config.fake_quant,
                    };
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[12, step, i as u64]));
                    let (logits, _) = net.forward(&mut g, &p, xn, opts, &mut rng)?;
                    let loss = g.softmax_cross_entropy(logits, y)?;
                    let grads = g.backward(loss)?;
                    let gv = p
                        .iter()
                        .map(|n| grads.get(*n).map_or_else(|| vec![0.0; g.dims(*n).len()], <[f64]>::to_vec))
                        .collect();
                    Ok((g.scalar(loss), gv))
                })
                .collect();
            let mut loss = 0.0;
            let mut acc: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
            for r in per {
                let (l, gv) = r?;
                loss += l;
                acc.iter_mut().zip(&gv).for_each(|(a, b)| a.iter_mut().zip(b).for_each(|(x, y)| *x += y));
            }
            if !loss.is_finite() {
                return Err(DeployError::Diverged { epoch, step: step as usize });
            }
            let n = batch.len() as f64;
            acc.iter_mut().flatten().for_each(|v| *v /= n);
            let refs: Vec<&[f64]> = acc.iter().map(Vec::as_slice).collect();
            opt.step(&mut net.params_mut().values_mut(), &refs);
            step += 1;
        }
        let snapshot = rounded(&net);
        let (val_loss, preds) = tape_eval(&snapshot, &val, config.fake_quant)?;
        if !val_loss.is_finite() {
            return Err(DeployError::Diverged { epoch, step: step as usize });
        }
        let labels: Vec<usize> = val.iter().map(|(_, y)| *y).collect();
        let val_accuracy = classification_metrics(&labels, &preds, net.classes())?.accuracy;
        let better = best
            .as_ref()
            .is_none_or(|(_, m)| val_accuracy > m.val_accuracy || (val_accuracy == m.val_accuracy && val_loss < m.val_loss));
        if better {
            best = Some((
                snapshot,
                TrainingMetadata {
                    epochs: config.epochs,
                    batch_size: config.batch_size,
                    learning_rate: config.learning_rate,
                    seed: config.seed,
                    fake_quant: config.fake_quant,
                    best_epoch: epoch + 1,
                    val_accuracy,
                    val_loss,
                },
            ));
        }
    }
    let (network, metadata) = match best {
        Some(b) => b,
        None => {
            let net = rounded(&net);
            let (val_loss, preds) = tape_eval(&net, &val, config.fake_quant)?;
            let labels: Vec<usize> = val.iter().map(|(_, y)| *y).collect();
            let val_accuracy = classification_metrics(&labels, &preds, net.classes())?.accuracy;
            let meta = TrainingMetadata {
                epochs: 0,
                batch_size: config.batch_size,
                learning_rate: config.learning_rate,
                seed: config.seed,
                fake_quant: config.fake_quant,
                best_epoch: 0,
                val_accuracy,
                val_loss,
            };
            (net, meta)
        }
    };
    Ok(TrainedModel {
        descriptor: descriptor.clone(),
        network,
        quant: None,
        normalization: Some(data.normalization().clone()),
        metadata,
    })
}

/// Accuracy and macro-F1 of `model` on labeled samples.
pub fn evaluate(model: &TrainedModel, samples: &[(&Tensor3, usize)], int8: bool) -> Result<Metrics> {
    let preds: Vec<Result<usize>> = samples.par_iter().map(|(x, _)| Ok(argmax(&model.predict(x, int8)?))).collect();
    let preds = preds.into_iter().collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = samples.iter().map(|(_, y)| *y).collect();
    classification_metrics(&labels, &preds, model.network.classes())
}
