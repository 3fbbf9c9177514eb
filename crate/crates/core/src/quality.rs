//! Feature-norm statistics and the clipped quality indicator `ẑ`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.99;
pub const DEFAULT_H: f64 = 0.33;
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Running mean / standard deviation of feature norms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu_z: f64,
    pub sigma_z: f64,
    pub alpha: f64,
    pub h: f64,
    pub step_count: u64,
    pub sigma_floor: f64,
    /// Weight the *current* batch by `alpha` instead of the running value.
    pub literal_ema: bool,
}

impl Default for NormStats {
    fn default() -> Self {
        Self::new(DEFAULT_ALPHA, DEFAULT_H)
    }
}

impl NormStats {
    pub fn new(alpha: f64, h: f64) -> Self {
        Self {
            mu_z: 0.0,
            sigma_z: 1.0,
            alpha,
            h,
            step_count: 0,
            sigma_floor: SIGMA_FLOOR,
            literal_ema: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Domain {
                what: "alpha",
                value: self.alpha,
            });
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::Domain { what: "h", value: self.h });
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Domain {
                what: "sigma_floor",
                value: self.sigma_floor,
            });
        }
        Ok(())
    }

    pub fn is_initialized(&self) -> bool {
        self.step_count > 0
    }

    /// Folds one batch of raw feature norms into the running statistics.
    /// The first batch initializes them directly.
    pub fn update(&mut self, batch_norms: &[f64]) -> Result<()> {
        let (mean, std) = batch_moments(batch_norms)?;
        if self.is_initialized() {
            let (keep, take) = if self.literal_ema {
                (1.0 - self.alpha, self.alpha)
            } else {
                (self.alpha, 1.0 - self.alpha)
            };
            self.mu_z = keep * self.mu_z + take * mean;
            self.sigma_z = keep * self.sigma_z + take * std;
        } else {
            self.mu_z = mean;
            self.sigma_z = std;
        }
        self.sigma_z = self.sigma_z.max(self.sigma_floor);
        self.step_count += 1;
        Ok(())
    }

    /// `ẑ = clip((‖z‖ − μ_z) / (σ_z / h), −1, 1)`.
    pub fn quality_indicator(&self, norm: f64) -> Result<f64> {
        if !self.is_initialized() {
            return Err(Error::UninitializedStats);
        }
        if !norm.is_finite() {
            return Err(Error::NonFinite("feature norm"));
        }
        Ok(((norm - self.mu_z) / (self.sigma_z / self.h)).clamp(-1.0, 1.0))
    }
}

/// Functional form of [`NormStats::update`].
pub fn update_stats(stats: &NormStats, batch_norms: &[f64]) -> Result<NormStats> {
    let mut next = stats.clone();
    next.update(batch_norms)?;
    Ok(next)
}

pub fn quality_indicator(stats: &NormStats, norm: f64) -> Result<f64> {
    stats.quality_indicator(norm)
}

/// Mean and population standard deviation.
fn batch_moments(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("norm batch"));
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFinite("norm batch"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Which per-sample signal drives the adaptive margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum ProxyChoice {
    #[default]
    FeatureNorm,
    GroundTruthProb,
    ExternalQuality,
}

impl ProxyChoice {
    pub const ALL: [ProxyChoice; 3] = [
        ProxyChoice::FeatureNorm,
        ProxyChoice::GroundTruthProb,
        ProxyChoice::ExternalQuality,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProxyChoice::FeatureNorm => "norm",
            ProxyChoice::GroundTruthProb => "prob",
            ProxyChoice::ExternalQuality => "external",
        }
    }
}

impl fmt::Display for ProxyChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProxyChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "norm" | "feature-norm" | "featurenorm" => Ok(ProxyChoice::FeatureNorm),
            "prob" | "gt-prob" | "groundtruthprob" => Ok(ProxyChoice::GroundTruthProb),
            "external" | "external-quality" | "externalquality" => Ok(ProxyChoice::ExternalQuality),
            other => Err(Error::Config(format!("unknown quality proxy `{other}`"))),
        }
    }
}

/// Raw per-sample inputs a proxy may draw on.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProxyInputs<'a> {
    pub norms: Option<&'a [f64]>,
    pub gt_probs: Option<&'a [f64]>,
    /// Externally supplied quality scores in `[0, 1]`.
    pub external: Option<&'a [f64]>,
}

/// Evaluates the chosen proxy, rescaled into `[−1, 1]`.
pub fn proxy_value(choice: ProxyChoice, stats: &NormStats, inputs: &ProxyInputs<'_>) -> Result<Vec<f64>> {
    match choice {
        ProxyChoice::FeatureNorm => {
            let norms = inputs.norms.ok_or(Error::Config("feature-norm proxy needs norms".into()))?;
            norms.iter().map(|&n| stats.quality_indicator(n)).collect()
        }
        ProxyChoice::GroundTruthProb => {
            let probs = inputs
                .gt_probs
                .ok_or(Error::Config("probability proxy needs P_y".into()))?;
            unit_interval_to_signed(probs, "P_y")
        }
        ProxyChoice::ExternalQuality => {
            let q = inputs
                .external
                .ok_or(Error::Config("external proxy needs quality scores".into()))?;
            unit_interval_to_signed(q, "external quality")
        }
    }
}

fn unit_interval_to_signed(values: &[f64], what: &'static str) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|&v| {
            if (0.0..=1.0).contains(&v) {
                Ok(2.0 * v - 1.0)
            } else {
                Err(Error::Domain { what, value: v })
            }
        })
        .collect()
}
