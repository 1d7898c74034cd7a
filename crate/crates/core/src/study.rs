//! Sampling study of the refinement-threshold bounds across feature noise
//! levels.

use crate::metrics::{refinement_bounds, unbiased_weight_ratio, MetricsError, RefinementBounds, RefinementInput};
use crate::seeds;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt::Write;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    /// Every pixel of `M₀` gets the same weight.
    Uniform,
    /// Softmax of Gaussian logits over `M₀`.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub sigmas: Vec<f64>,
    pub samples_per_sigma: usize,
    pub feature_dim: usize,
    /// Pixel count per category is drawn from `min_pixels..=max_pixels`.
    pub min_pixels: usize,
    pub max_pixels: usize,
    pub weights: WeightKind,
    /// Keep `|M₀ ∩ C₁| < |M₀ ∩ C₀|` in every sample.
    pub dominant_c0: bool,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            sigmas: vec![0.0, 0.05, 0.1, 0.2, 0.5],
            samples_per_sigma: 200,
            feature_dim: 8,
            min_pixels: 2,
            max_pixels: 12,
            weights: WeightKind::Uniform,
            dominant_c0: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StudyError {
    #[error("study config field `{field}`: {message}")]
    Config { field: &'static str, message: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl StudyConfig {
    pub fn validate(&self) -> Result<(), StudyError> {
        let bad = |field, message: &str| {
            Err(StudyError::Config {
                field,
                message: message.into(),
            })
        };
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("sigmas", "need at least one finite, nonnegative value");
        }
        if self.samples_per_sigma == 0 {
            return bad("samples_per_sigma", "must be at least 1");
        }
        if self.feature_dim < 2 {
            return bad("feature_dim", "two orthonormal prototypes need at least 2 dimensions");
        }
        if self.min_pixels < 2 || self.max_pixels < self.min_pixels {
            return bad("min_pixels", "need 2 <= min_pixels <= max_pixels");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudySample {
    pub sigma: f64,
    pub area_c0: usize,
    pub area_c1: usize,
    pub weight_ratio: f64,
    pub bounds: RefinementBounds,
}

impl StudySample {
    pub fn area_ratio(&self) -> f64 {
        self.area_c1 as f64 / self.area_c0 as f64
    }

    pub fn threshold_exists(&self) -> bool {
        self.bounds.scanned_threshold.is_some()
    }

    /// Whether the bounds promise a separating threshold.
    pub fn guaranteed(&self) -> bool {
        self.bounds.condition && self.bounds.intra.0 > self.bounds.inter.1
    }
}

/// One instance: `C₀` prototype `e₀`, `C₁` prototype `e₁`, each pixel
/// perturbed by `σ`-scaled Gaussian noise.
fn sample(cfg: &StudyConfig, sigma: f64, rng: &mut ChaCha8Rng) -> Result<StudySample, StudyError> {
    let d = cfg.feature_dim;
    let n0 = rng.gen_range(cfg.min_pixels..=cfg.max_pixels);
    let n1 = rng.gen_range(cfg.min_pixels..=cfg.max_pixels);
    let in_c1: Vec<bool> = (0..n0 + n1).map(|i| i >= n0).collect();
    let features: Vec<Vec<f64>> = in_c1
        .iter()
        .map(|&c1| {
            (0..d)
                .map(|j| f64::from(j == usize::from(c1)) + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    let a0 = rng.gen_range(1..=n0);
    let cap1 = if cfg.dominant_c0 { (a0 - 1).min(n1) } else { n1 };
    // a0 = 1 leaves no room for a smaller C1 share; grow C0 instead
    let (a0, cap1) = if cap1 == 0 { (n0, (n0 - 1).min(n1)) } else { (a0, cap1) };
    let a1 = rng.gen_range(1..=cap1.max(1));
    let in_m0: Vec<bool> = (0..n0 + n1).map(|i| if i < n0 { i < a0 } else { i - n0 < a1 }).collect();

    let weights: Vec<f64> = match cfg.weights {
        WeightKind::Uniform => in_m0.iter().map(|&m| if m { 1.0 / (a0 + a1) as f64 } else { 0.0 }).collect(),
        WeightKind::Softmax => {
            let logits: Vec<f64> = in_m0.iter().map(|_| rng.sample(StandardNormal)).collect();
            let max = logits
                .iter()
                .zip(&in_m0)
                .filter(|p| *p.1)
                .map(|p| *p.0)
                .fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits
                .iter()
                .zip(&in_m0)
                .map(|(l, &m)| if m { (l - max).exp() } else { 0.0 })
                .collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        }
    };
    let alpha: Vec<f64> = (0..a0).map(|i| weights[i]).collect();
    let beta: Vec<f64> = (0..a1).map(|i| weights[n0 + i]).collect();
    let ratio = unbiased_weight_ratio(&alpha, &beta)?;
    let bounds = refinement_bounds(&RefinementInput {
        features,
        in_c1,
        in_m0,
        weights,
    })?;
    Ok(StudySample {
        sigma,
        area_c0: a0,
        area_c1: a1,
        weight_ratio: ratio.weight_ratio,
        bounds,
    })
}

/// All samples, grouped by sigma in config order.
pub fn run_study(cfg: &StudyConfig) -> Result<Vec<StudySample>, StudyError> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.sigmas.len() * cfg.samples_per_sigma);
    for (k, &sigma) in cfg.sigmas.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(&[cfg.seed, k as u64]));
        for _ in 0..cfg.samples_per_sigma {
            out.push(sample(cfg, sigma, &mut rng)?);
        }
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9}")).unwrap_or_default()
}

pub const CSV_HEADER: &str = "sample,sigma,area_c0,area_c1,area_ratio,weight_ratio,intra_min,intra_max,\
inter_min,inter_max,sum_alpha,sum_beta,ratio_bound,condition,interval_lo,interval_hi,partial,\
threshold_exists,scanned_threshold";

pub fn to_csv(samples: &[StudySample]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for (i, x) in samples.iter().enumerate() {
        let b = &x.bounds;
        writeln!(
            s,
            "{i},{},{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{},{},{},{},{},{},{}",
            x.sigma,
            x.area_c0,
            x.area_c1,
            x.area_ratio(),
            x.weight_ratio,
            b.intra.0,
            b.intra.1,
            b.inter.0,
            b.inter.1,
            b.sum_alpha,
            b.sum_beta,
            opt(b.ratio_bound),
            b.condition,
            opt(b.interval.map(|v| v.0)),
            opt(b.interval.map(|v| v.1)),
            b.partial,
            x.threshold_exists(),
            opt(b.scanned_threshold),
        )
        .unwrap();
    }
    s
}

/// Per-sigma counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaSummary {
    pub sigma: f64,
    pub samples: usize,
    pub condition: usize,
    pub guaranteed: usize,
    pub exists: usize,
    /// Guaranteed by the bounds but no separating threshold found.
    pub counterexamples: usize,
}

pub fn summarize(cfg: &StudyConfig, samples: &[StudySample]) -> Vec<SigmaSummary> {
    cfg.sigmas
        .iter()
        .zip(samples.chunks(cfg.samples_per_sigma))
        .map(|(&sigma, chunk)| SigmaSummary {
            sigma,
            samples: chunk.len(),
            condition: chunk.iter().filter(|s| s.bounds.condition).count(),
            guaranteed: chunk.iter().filter(|s| s.guaranteed()).count(),
            exists: chunk.iter().filter(|s| s.threshold_exists()).count(),
            counterexamples: chunk.iter().filter(|s| s.guaranteed() && !s.threshold_exists()).count(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_orthonormal_always_separates() {
        let cfg = StudyConfig {
            sigmas: vec![0.0],
            samples_per_sigma: 300,
            ..Default::default()
        };
        let samples = run_study(&cfg).unwrap();
        for s in &samples {
            assert!(s.area_ratio() < 1.0);
            assert!((s.weight_ratio - s.area_ratio()).abs() < 1e-12);
            assert!(s.bounds.condition);
            assert!(s.threshold_exists());
        }
    }

    #[test]
    fn no_counterexamples_under_noise() {
        for weights in [WeightKind::Uniform, WeightKind::Softmax] {
            let cfg = StudyConfig {
                weights,
                dominant_c0: false,
                ..Default::default()
            };
            let samples = run_study(&cfg).unwrap();
            let sum = summarize(&cfg, &samples);
            assert_eq!(sum.len(), 5);
            assert!(sum.iter().all(|s| s.counterexamples == 0), "{sum:?}");
            assert!(sum.last().unwrap().exists < sum[0].exists || weights == WeightKind::Softmax);
        }
    }

    #[test]
    fn csv_has_row_per_sample() {
        let cfg = StudyConfig {
            samples_per_sigma: 7,
            ..Default::default()
        };
        let csv = to_csv(&run_study(&cfg).unwrap());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 35);
        let cols = CSV_HEADER.split(',').count();
        assert!(lines.iter().all(|l| l.split(',').count() == cols));
        assert_eq!(csv, to_csv(&run_study(&cfg).unwrap()));
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = StudyConfig {
            sigmas: vec![-1.0],
            ..Default::default()
        };
        assert!(matches!(run_study(&cfg), Err(StudyError::Config { field: "sigmas", .. })));
    }
}
