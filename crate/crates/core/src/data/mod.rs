//! Windowed time-series datasets: CSV ingestion, a synthetic generator,
//! seeded three-way splits and train-only normalization.

mod synthetic;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Shape3, Tensor3};

pub use synthetic::{default_patterns, generate_synthetic, ChannelPattern, SyntheticRecipe};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("row {row}: {msg}")]
    BadRow { row: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::Invalid(format!(
                "split fractions {}/{}/{} must be in [0, 1] and sum to 1",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        label_column: String,
        channel_columns: Vec<String>,
    },
    Synthetic(SyntheticRecipe),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub ts_l: usize,
    /// Step between window starts; CSV sources only.
    #[serde(default)]
    pub window_stride: Option<usize>,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default)]
    pub seed: u64,
}

impl DatasetSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let mut spec: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if let DataSource::Csv { path: csv, .. } = &mut spec.source {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        Ok(spec)
    }

    pub fn build(&self) -> Result<WindowedDataset> {
        match &self.source {
            DataSource::Csv { .. } => load_csv(self),
            DataSource::Synthetic(recipe) => {
                if recipe.ts_l != self.ts_l {
                    return Err(DataError::Invalid(format!(
                        "recipe window {} differs from ts_l {}",
                        recipe.ts_l, self.ts_l
                    )));
                }
                let (windows, labels) = generate_synthetic(recipe)?;
                WindowedDataset::new(windows, labels, recipe.num_classes, self.split, self.seed)
            }
        }
    }
}

/// Per-channel z-normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Z-normalizes `x` in place, channel by channel.
    pub fn apply(&self, x: &mut Tensor3) -> Result<()> {
        let s = x.shape().s;
        if self.mean.len() != s || self.std.len() != s || x.shape().f != 1 {
            return Err(DataError::Invalid(format!("window {} against {} channel statistics", x.shape(), self.mean.len())));
        }
        for row in x.data_mut().chunks_exact_mut(s) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        Ok(())
    }
}

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug)]
pub struct WindowedDataset {
    windows: Vec<Tensor3>,
    labels: Vec<usize>,
    num_classes: usize,
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
    norm: Normalization,
    test_reads: AtomicUsize,
}

impl Clone for WindowedDataset {
    fn clone(&self) -> Self {
        Self {
            windows: self.windows.clone(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            train: self.train.clone(),
            val: self.val.clone(),
            test: self.test.clone(),
            norm: self.norm.clone(),
            test_reads: AtomicUsize::new(self.test_reads()),
        }
    }
}

impl WindowedDataset {
    /// Splits raw windows with a seeded shuffle, then z-normalizes every
    /// window with statistics of the train split.
    pub fn new(windows: Vec<Tensor3>, labels: Vec<usize>, num_classes: usize, split: SplitFractions, seed: u64) -> Result<Self> {
        split.validate()?;
        if windows.is_empty() || windows.len() != labels.len() {
            return Err(DataError::Invalid(format!("{} windows with {} labels", windows.len(), labels.len())));
        }
        let shape = windows[0].shape();
        if windows.iter().any(|w| w.shape() != shape) {
            return Err(DataError::Invalid("windows differ in shape".into()));
        }
        if let Some(l) = labels.iter().find(|l| **l >= num_classes) {
            return Err(DataError::Invalid(format!("label {l} outside {num_classes} classes")));
        }
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = order.len();
        let n_train = (split.train * n as f64).round() as usize;
        let n_val = ((split.val * n as f64).round() as usize).min(n - n_train);
        let test = order.split_off(n_train + n_val);
        let val = order.split_off(n_train);
        let train = order;

        let norm = stats(&windows, &train, shape);
        let mut windows = windows;
        for w in &mut windows {
            norm.apply(w)?;
        }
        Ok(Self {
            windows,
            labels,
            num_classes,
            train,
            val,
            test,
            norm,
            test_reads: AtomicUsize::new(0),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn window_shape(&self) -> Shape3 {
        self.windows[0].shape()
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn val_indices(&self) -> &[usize] {
        &self.val
    }

    pub fn test_len(&self) -> usize {
        self.test.len()
    }

    pub fn sample(&self, idx: usize) -> (&Tensor3, usize) {
        (&self.windows[idx], self.labels[idx])
    }

    pub fn train(&self) -> Vec<(&Tensor3, usize)> {
        self.train.iter().map(|&i| self.sample(i)).collect()
    }

    pub fn val(&self) -> Vec<(&Tensor3, usize)> {
        self.val.iter().map(|&i| self.sample(i)).collect()
    }

    /// Test samples; every call is counted.
    pub fn test(&self) -> Vec<(&Tensor3, usize)> {
        self.test_reads.fetch_add(1, Ordering::Relaxed);
        self.test.iter().map(|&i| self.sample(i)).collect()
    }

    /// Number of times the test split has been handed out.
    pub fn test_reads(&self) -> usize {
        self.test_reads.load(Ordering::Relaxed)
    }

    /// The same dataset with the test split removed.
    pub fn without_test(&self) -> Self {
        Self {
            test: Vec::new(),
            test_reads: AtomicUsize::new(0),
            ..self.clone()
        }
    }
}

fn stats(windows: &[Tensor3], train: &[usize], shape: Shape3) -> Normalization {
    let s = shape.s;
    let mut sum = vec![0.0; s];
    let mut sq = vec![0.0; s];
    let mut n = 0usize;
    for &i in train {
        for row in windows[i].data().chunks_exact(s) {
            for c in 0..s {
                sum[c] += row[c];
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|v| v / n).collect();
    for &i in train {
        for row in windows[i].data().chunks_exact(s) {
            for c in 0..s {
                sq[c] += (row[c] - mean[c]).powi(2);
            }
        }
    }
    let std = sq.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
    Normalization { mean, std }
}

/// Most frequent label; ties go to the smallest.
fn majority(labels: &[usize]) -> usize {
    let mut counts = std::collections::BTreeMap::new();
    for l in labels {
        *counts.entry(*l).or_insert(0usize) += 1;
    }
    let max = counts.values().copied().max().unwrap_or(0);
    counts.into_iter().find(|(_, c)| *c == max).map_or(0, |(l, _)| l)
}

/// Sliding windows over a CSV recording, labeled by majority vote.
pub fn load_csv(spec: &DatasetSpec) -> Result<WindowedDataset> {
    let DataSource::Csv {
        path,
        label_column,
        channel_columns,
    } = &spec.source
    else {
        return Err(DataError::Invalid("dataset spec is not a CSV source".into()));
    };
    if spec.ts_l == 0 || channel_columns.is_empty() {
        return Err(DataError::Invalid("ts_l and channel_columns must be non-empty".into()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.into()))
    };
    let label_idx = col(label_column)?;
    let chan_idx = channel_columns.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let field = |j: usize| rec.get(j).ok_or(DataError::BadRow { row, msg: "short row".into() });
        let mut vals = Vec::with_capacity(chan_idx.len());
        for &j in &chan_idx {
            let v: f64 = field(j)?.trim().parse().map_err(|_| DataError::BadRow {
                row,
                msg: format!("column {} is not a number", headers.get(j).unwrap_or("?")),
            })?;
            vals.push(v);
        }
        let label: usize = field(label_idx)?.trim().parse().map_err(|_| DataError::BadRow {
            row,
            msg: format!("label {:?} is not a class index", rec.get(label_idx).unwrap_or("")),
        })?;
        rows.push(vals);
        labels.push(label);
    }
    if rows.len() < spec.ts_l {
        return Err(DataError::Invalid(format!("{} rows, fewer than ts_l {}", rows.len(), spec.ts_l)));
    }
    let stride = spec.window_stride.unwrap_or(spec.ts_l);
    if stride == 0 {
        return Err(DataError::Invalid("window_stride must be positive".into()));
    }
    let s = chan_idx.len();
    let mut windows = Vec::new();
    let mut wl = Vec::new();
    let mut start = 0;
    while start + spec.ts_l <= rows.len() {
        let data: Vec<f64> = rows[start..start + spec.ts_l].iter().flatten().copied().collect();
        windows.push(Tensor3::new(Shape3::new(spec.ts_l, s, 1), data).expect("window shape"));
        wl.push(majority(&labels[start..start + spec.ts_l]));
        start += stride;
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    WindowedDataset::new(windows, wl, num_classes, spec.split, spec.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_ties_go_low() {
        assert_eq!(majority(&[2, 1, 2, 1]), 1);
        assert_eq!(majority(&[3, 3, 0]), 3);
    }

    #[test]
    fn fractions_must_sum_to_one() {
        let bad = SplitFractions {
            train: 0.5,
            val: 0.2,
            test: 0.2,
        };
        assert!(bad.validate().is_err());
        assert!(SplitFractions::default().validate().is_ok());
    }
}
