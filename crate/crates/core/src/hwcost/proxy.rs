use serde::{Deserialize, Serialize};

use super::signature::network_signatures;
use super::{HwError, Result};
use crate::space::Network;

/// `2 * MACs` summed over the network's ops.
pub fn flops_estimate(net: &Network) -> u64 {
    network_signatures(net).iter().flatten().map(|s| 2 * s.macs()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Coefficient of determination on the fitted samples.
    pub r2: f64,
}

impl LinearFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

/// Ordinary least squares of latency on flops.
pub fn fit_flops_proxy(samples: &[(f64, f64)]) -> Result<LinearFit> {
    if samples.len() < 2 {
        return Err(HwError::Invalid(format!("need at least 2 samples, got {}", samples.len())));
    }
    let n = samples.len() as f64;
    let mx = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let my = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let sxx: f64 = samples.iter().map(|s| (s.0 - mx).powi(2)).sum();
    let sxy: f64 = samples.iter().map(|s| (s.0 - mx) * (s.1 - my)).sum();
    if sxx == 0.0 {
        return Err(HwError::Invalid("all samples have the same flops".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let pred: Vec<f64> = samples.iter().map(|s| slope * s.0 + intercept).collect();
    let actual: Vec<f64> = samples.iter().map(|s| s.1).collect();
    Ok(LinearFit {
        slope,
        intercept,
        r2: r_squared(&actual, &pred),
    })
}

/// `1 - SS_res / SS_tot`; 1 when the data are constant and matched.
pub fn r_squared(actual: &[f64], predicted: &[f64]) -> f64 {
    let n = actual.len() as f64;
    let mean = actual.iter().sum::<f64>() / n;
    let ss_tot: f64 = actual.iter().map(|a| (a - mean).powi(2)).sum();
    let ss_res: f64 = actual.iter().zip(predicted).map(|(a, p)| (a - p).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - ss_res / ss_tot
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_points_on_identity() {
        let fit = fit_flops_proxy(&[(1.0, 1.0), (2.0, 2.0)]).unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-12);
        assert!(fit.intercept.abs() < 1e-12);
    }

    #[test]
    fn linear_data_fit_perfectly() {
        let pts: Vec<_> = (0..10).map(|i| (i as f64, 3.0 * i as f64 + 2.0)).collect();
        let fit = fit_flops_proxy(&pts).unwrap();
        assert!((fit.r2 - 1.0).abs() < 1e-12);
        assert!((fit.predict(20.0) - 62.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_flops_rejected() {
        assert!(fit_flops_proxy(&[(1.0, 1.0), (1.0, 2.0)]).is_err());
        assert!(fit_flops_proxy(&[(1.0, 1.0)]).is_err());
    }
}
