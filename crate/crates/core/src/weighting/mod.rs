//! The six weighting estimators, balance diagnostics, positivity checks and trimming.

mod balance;
mod cbps;
mod density;
mod entropy;
mod optweight;
mod trim;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Estimator, FeatureKind, WeightVector};
use crate::error::{Error, Result};
use crate::treatment::GbmParams;

pub use balance::{balance_diagnostics, BalanceReport, CovariateBalance};
pub use cbps::{cbps_weights, CbpsParams};
pub use density::{
    binary_ratio, density_ratio, iptw_weights, model_ratio, positivity_check, pswgbm_weights, super_weights,
    PositivityDiagnostic,
};
pub use entropy::{
    entropy_dual, npcbps_moments, npcbps_relaxed_weights, npcbps_weights, solve_entropy_dual, DualSolution,
    NpcbpsParams,
};
pub use optweight::{optweight_moments, optweights, optweights_relaxed, solve_optweight, OptWeightParams, QpSolution};
pub use trim::weight_trim;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightingSettings {
    /// Trim percentile for the density-ratio estimators; `None` disables trimming.
    pub trim_percentile: Option<f64>,
    pub optweight: OptWeightParams,
    pub npcbps: NpcbpsParams,
    pub cbps: CbpsParams,
    /// Tree counts searched by PSWGBM.
    pub pswgbm_grid: Vec<usize>,
    /// Tree shape for PSWGBM (its `n_trees` is taken from the grid).
    pub gbm: GbmParams,
    pub superlearner_folds: usize,
    /// Conditional-density floor on the standardized treatment scale.
    pub positivity_floor: f64,
    /// When exact balance is infeasible for NPCBPS or OPTWEIGHT, fall back to
    /// the penalized version instead of failing.
    pub relax_infeasible: bool,
    /// Penalty strength of the fallback (per sample for OPTWEIGHT).
    pub relax_penalty: f64,
}

impl Default for WeightingSettings {
    fn default() -> Self {
        Self {
            trim_percentile: None,
            optweight: OptWeightParams::default(),
            npcbps: NpcbpsParams::default(),
            cbps: CbpsParams::default(),
            pswgbm_grid: vec![25, 50, 100, 200, 400],
            gbm: GbmParams::default(),
            superlearner_folds: 5,
            positivity_floor: 1e-4,
            relax_infeasible: true,
            relax_penalty: 100.0,
        }
    }
}

impl WeightingSettings {
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.trim_percentile {
            if !(p > 50.0 && p <= 100.0) {
                return Err(Error::InvalidParams(format!("trim percentile must be in (50, 100], got {p}")));
            }
        }
        if !(self.optweight.delta > 0.0) {
            return Err(Error::InvalidParams(format!("optweight delta must be > 0, got {}", self.optweight.delta)));
        }
        if self.pswgbm_grid.is_empty() || self.pswgbm_grid.contains(&0) {
            return Err(Error::InvalidParams("pswgbm grid must be nonempty positive tree counts".into()));
        }
        if self.superlearner_folds < 2 {
            return Err(Error::InvalidParams("super learner needs at least 2 folds".into()));
        }
        if !(self.relax_penalty > 0.0) {
            return Err(Error::InvalidParams("relax penalty must be > 0".into()));
        }
        Ok(())
    }
}

/// Weights for treatment `t` given covariates `v` under the chosen estimator.
pub fn estimate_weights(
    estimator: Estimator,
    t: &[f64],
    v: &DMatrix<f64>,
    kind: FeatureKind,
    settings: &WeightingSettings,
) -> Result<WeightVector> {
    if v.nrows() != t.len() {
        return Err(Error::InvalidParams(format!("{} covariate rows vs {} treatment values", v.nrows(), t.len())));
    }
    let w = match estimator {
        Estimator::Iptw => iptw_weights(t, v, kind, settings),
        Estimator::Cbps => cbps_weights(t, v, kind, settings),
        Estimator::Pswgbm => pswgbm_weights(t, v, kind, settings),
        Estimator::Super => super_weights(t, v, kind, settings),
        Estimator::Npcbps => match npcbps_weights(t, v, settings) {
            Err(Error::Infeasible { .. }) if settings.relax_infeasible => npcbps_relaxed_weights(t, v, settings),
            r => r,
        },
        Estimator::Optweight => match optweights(t, v, &settings.optweight) {
            Err(Error::Infeasible { .. }) if settings.relax_infeasible => optweights_relaxed(t, v, settings),
            r => r,
        },
    }?;
    Ok(w.with_estimator(estimator))
}
