//! Run configuration: a flat JSON object with dotted keys, e.g.
//!
//! ```json
//! { "estimators": ["IPTW", "CBPS"], "alpha": 0.05, "inference": "sandwich",
//!   "bootstrap.reps": 200, "trim.percentile": 99, "optweight.delta": 0.1,
//!   "pswgbm.grid": [25, 50, 100], "seed": 7, "workers": 4 }
//! ```
//!
//! Absent keys take their defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Estimator;
use crate::effect::{Inference, MIN_BOOTSTRAP_REPS};
use crate::error::{Error, Result};
use crate::weighting::WeightingSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub estimators: Vec<Estimator>,
    pub alpha: f64,
    pub inference: Inference,
    #[serde(rename = "bootstrap.reps")]
    pub bootstrap_reps: usize,
    /// `None` disables trimming.
    #[serde(rename = "trim.percentile")]
    pub trim_percentile: Option<f64>,
    #[serde(rename = "optweight.delta")]
    pub optweight_delta: f64,
    #[serde(rename = "pswgbm.grid")]
    pub pswgbm_grid: Vec<usize>,
    pub seed: u64,
    /// Attribution worker threads; 0 uses every available core.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = WeightingSettings::default();
        Self {
            estimators: Estimator::ALL.to_vec(),
            alpha: 0.05,
            inference: Inference::Sandwich,
            bootstrap_reps: 200,
            trim_percentile: w.trim_percentile,
            optweight_delta: w.optweight.delta,
            pswgbm_grid: w.pswgbm_grid,
            seed: 0,
            workers: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParams(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidParams("at least one estimator is required".into()));
        }
        if self.inference == Inference::Bootstrap && self.bootstrap_reps < MIN_BOOTSTRAP_REPS {
            return Err(Error::InvalidParams(format!(
                "bootstrap.reps must be at least {MIN_BOOTSTRAP_REPS}, got {}",
                self.bootstrap_reps
            )));
        }
        self.weighting().validate()
    }

    pub fn weighting(&self) -> WeightingSettings {
        let mut w = WeightingSettings { trim_percentile: self.trim_percentile, ..Default::default() };
        w.optweight.delta = self.optweight_delta;
        w.pswgbm_grid = self.pswgbm_grid.clone();
        w
    }

    /// Estimators in canonical report order, without duplicates.
    pub fn ordered_estimators(&self) -> Vec<Estimator> {
        Estimator::ALL.into_iter().filter(|e| self.estimators.contains(e)).collect()
    }
}
