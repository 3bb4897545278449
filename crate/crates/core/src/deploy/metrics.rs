use serde::{Deserialize, Serialize};

use super::{DeployError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Accuracy and macro-F1 over `classes` classes. A class without support
/// and without predictions scores F1 = 0.
pub fn classification_metrics(labels: &[usize], predictions: &[usize], classes: usize) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(DeployError::Input("cannot evaluate an empty split".into()));
    }
    if labels.len() != predictions.len() {
        return Err(DeployError::Input(format!(
            "{} labels but {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    if let Some(c) = labels.iter().chain(predictions).find(|c| **c >= classes) {
        return Err(DeployError::Input(format!("class {c} outside {classes} classes")));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&y, &p) in labels.iter().zip(predictions) {
        if y == p {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let f1: f64 = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(Metrics {
        accuracy: tp.iter().sum::<usize>() as f64 / labels.len() as f64,
        macro_f1: f1 / classes as f64,
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b })
}
