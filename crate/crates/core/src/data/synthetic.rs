use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Result};
use crate::tensor::{Shape3, Tensor3};

/// Sinusoid of one channel: `amplitude * sin(2π * frequency * t + phase)`,
/// frequency in cycles per window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelPattern {
    pub frequency: f64,
    pub phase: f64,
    pub amplitude: f64,
}

/// Per-class sinusoid patterns plus Gaussian noise. Classes stay separable
/// for a nearest-neighbor classifier while `noise_std` is at most about
/// half the amplitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRecipe {
    pub num_classes: usize,
    pub ts_l: usize,
    pub ts_s: usize,
    /// `patterns[class][channel]`; empty selects [`default_patterns`].
    #[serde(default)]
    pub patterns: Vec<Vec<ChannelPattern>>,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    /// Each window's phases are shifted by a uniform draw in `±phase_jitter`.
    #[serde(default = "default_jitter")]
    pub phase_jitter: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

fn default_noise() -> f64 {
    0.1
}
fn default_jitter() -> f64 {
    0.5
}

/// Class `c` oscillates at `c + 1` cycles per window on every channel, with
/// channel-dependent phase and an amplitude that alternates by class and
/// channel.
pub fn default_patterns(num_classes: usize, ts_s: usize) -> Vec<Vec<ChannelPattern>> {
    (0..num_classes)
        .map(|c| {
            (0..ts_s)
                .map(|s| ChannelPattern {
                    frequency: (c + 1) as f64,
                    phase: PI * s as f64 / ts_s as f64,
                    amplitude: if (c + s) % 2 == 0 { 1.0 } else { 0.5 },
                })
                .collect()
        })
        .collect()
}

impl SyntheticRecipe {
    pub fn new(num_classes: usize, ts_l: usize, ts_s: usize, samples_per_class: usize, seed: u64) -> Self {
        Self {
            num_classes,
            ts_l,
            ts_s,
            patterns: default_patterns(num_classes, ts_s),
            noise_std: default_noise(),
            phase_jitter: default_jitter(),
            samples_per_class,
            seed,
        }
    }

    fn patterns(&self) -> std::borrow::Cow<'_, [Vec<ChannelPattern>]> {
        if self.patterns.is_empty() {
            default_patterns(self.num_classes, self.ts_s).into()
        } else {
            self.patterns.as_slice().into()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.ts_l == 0 || self.ts_s == 0 || self.samples_per_class == 0 {
            return Err(DataError::Invalid("recipe needs >= 2 classes and nonzero sizes".into()));
        }
        let patterns = self.patterns();
        if patterns.len() != self.num_classes || patterns.iter().any(|p| p.len() != self.ts_s) {
            return Err(DataError::Invalid(format!(
                "patterns must be {} classes x {} channels",
                self.num_classes, self.ts_s
            )));
        }
        if !(self.noise_std >= 0.0) || !(self.phase_jitter >= 0.0) {
            return Err(DataError::Invalid("noise_std and phase_jitter must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Balanced windows of shape `(ts_l, ts_s, 1)`, classes interleaved.
pub fn generate_synthetic(recipe: &SyntheticRecipe) -> Result<(Vec<Tensor3>, Vec<usize>)> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let noise = Normal::new(0.0, recipe.noise_std).map_err(|e| DataError::Invalid(e.to_string()))?;
    let shape = Shape3::new(recipe.ts_l, recipe.ts_s, 1);
    let patterns = recipe.patterns();
    let mut windows = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..recipe.samples_per_class {
        for (c, pats) in patterns.iter().enumerate() {
            let shift = if recipe.phase_jitter > 0.0 {
                rng.random_range(-recipe.phase_jitter..=recipe.phase_jitter)
            } else {
                0.0
            };
            let mut data = Vec::with_capacity(shape.len());
            for t in 0..recipe.ts_l {
                let x = t as f64 / recipe.ts_l as f64;
                for p in pats {
                    let v = p.amplitude * (2.0 * PI * p.frequency * x + p.phase + shift).sin();
                    data.push(v + noise.sample(&mut rng));
                }
            }
            windows.push(Tensor3::new(shape, data).expect("window shape"));
            labels.push(c);
        }
    }
    Ok((windows, labels))
}
