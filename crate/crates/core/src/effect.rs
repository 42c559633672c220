//! Outcome modeling on weighted samples: ACE point estimates, robust standard
//! errors and the significance test behind the attributions.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{effective_sample_size, EffectEstimate, Estimator, FeatureKind, WeightVector};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::stats::{sample_sd, two_sided_p, Z_95};
use crate::weighting::{estimate_weights, WeightingSettings};

/// Bootstrap needs at least this many resamples.
pub const MIN_BOOTSTRAP_REPS: usize = 50;
/// Largest tolerated fraction of failed bootstrap resamples.
const MAX_BOOTSTRAP_FAILURES: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WlsFit {
    pub slope: f64,
    pub intercept: f64,
    pub robust_se_slope: f64,
    pub n_eff: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Inference {
    Sandwich,
    Bootstrap,
}

/// Weighted least squares of `y` on `a + b t` with the heteroskedasticity-robust
/// variance `sum w^2 t~^2 e^2 / (sum w t~^2)^2` for the slope.
pub fn wls_fit(t: &[f64], y: &[f64], w: &WeightVector) -> Result<WlsFit> {
    wls_fit_slice(t, y, &w.weights)
}

pub fn wls_fit_slice(t: &[f64], y: &[f64], w: &[f64]) -> Result<WlsFit> {
    if t.len() != y.len() || t.len() != w.len() {
        return Err(Error::InvalidParams(format!(
            "length mismatch: T {}, Y {}, w {}",
            t.len(),
            y.len(),
            w.len()
        )));
    }
    if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::InvalidWeights("weights must be finite and nonnegative".into()));
    }
    let positive = w.iter().filter(|&&x| x > 0.0).count();
    if positive < 3 {
        return Err(Error::Precondition(format!("need at least 3 positively weighted samples, got {positive}")));
    }
    let sw: f64 = w.iter().sum();
    let mt = w.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = w.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..t.len() {
        let dt = t[i] - mt;
        sxx += w[i] * dt * dt;
        sxy += w[i] * dt * (y[i] - my);
    }
    let scale = t.iter().map(|x| (x - mt).abs()).fold(0.0, f64::max);
    if !(sxx > 1e-24 * sw * scale * scale) {
        return Err(Error::DegenerateTreatment("weighted variance of the treatment is zero".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mt;
    let mut meat = 0.0;
    for i in 0..t.len() {
        let dt = t[i] - mt;
        let e = y[i] - intercept - slope * t[i];
        meat += w[i] * w[i] * dt * dt * e * e;
    }
    Ok(WlsFit { slope, intercept, robust_se_slope: meat.sqrt() / sxx, n_eff: effective_sample_size(w) })
}

fn finish_estimate(
    feature: &str,
    mu: f64,
    se: f64,
    kind: FeatureKind,
    estimator: Option<Estimator>,
    n_eff: f64,
) -> EffectEstimate {
    let p_value = if se > 0.0 {
        two_sided_p(mu / se)
    } else if mu == 0.0 {
        1.0
    } else {
        0.0
    };
    EffectEstimate {
        feature: feature.to_string(),
        mu,
        se,
        p_value,
        ci_low: mu - Z_95 * se,
        ci_high: mu + Z_95 * se,
        estimator,
        kind,
        n_eff,
        exp_mu: (kind == FeatureKind::Binary).then(|| mu.exp()),
        warnings: Vec::new(),
    }
}

/// Per-unit ACE from the weighted marginal structural model `Y ~ a + b T`.
pub fn ace_continuous(
    feature: &str,
    t: &[f64],
    y: &[f64],
    w: &WeightVector,
    estimator: Option<Estimator>,
) -> Result<EffectEstimate> {
    let fit = wls_fit(t, y, w)?;
    Ok(finish_estimate(feature, fit.slope, fit.robust_se_slope, FeatureKind::Continuous, estimator, fit.n_eff))
}

/// Weighted difference in arm means for a 0/1 treatment.
pub fn ace_binary(
    feature: &str,
    t: &[f64],
    y: &[f64],
    w: &WeightVector,
    estimator: Option<Estimator>,
) -> Result<EffectEstimate> {
    if t.len() != y.len() || t.len() != w.len() {
        return Err(Error::InvalidParams("length mismatch between T, Y and w".into()));
    }
    let arm = |level: bool| -> Result<(f64, f64)> {
        let idx: Vec<usize> = (0..t.len()).filter(|&i| (t[i] > 0.5) == level).collect();
        let sw: f64 = idx.iter().map(|&i| w.weights[i]).sum();
        if idx.is_empty() || !(sw > 0.0) {
            return Err(Error::DegenerateTreatment(format!(
                "treatment level {} has no weighted samples",
                u8::from(level)
            )));
        }
        let m = idx.iter().map(|&i| w.weights[i] * y[i]).sum::<f64>() / sw;
        let v = idx.iter().map(|&i| (w.weights[i] * (y[i] - m)).powi(2)).sum::<f64>() / (sw * sw);
        Ok((m, v))
    };
    let (m1, v1) = arm(true)?;
    let (m0, v0) = arm(false)?;
    Ok(finish_estimate(feature, m1 - m0, (v1 + v0).sqrt(), FeatureKind::Binary, estimator, w.ess))
}

pub fn ace(
    feature: &str,
    t: &[f64],
    y: &[f64],
    w: &WeightVector,
    kind: FeatureKind,
    estimator: Option<Estimator>,
) -> Result<EffectEstimate> {
    match kind {
        FeatureKind::Continuous => ace_continuous(feature, t, y, w, estimator),
        FeatureKind::Binary => ace_binary(feature, t, y, w, estimator),
    }
}

/// Bootstrap sd of the effect over row resamples, re-estimating the weights
/// on every resample. Resample `r` draws from its own stream `derive_seed(seed, [r])`.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_se(
    t: &[f64],
    y: &[f64],
    v: &DMatrix<f64>,
    kind: FeatureKind,
    estimator: Estimator,
    settings: &WeightingSettings,
    reps: usize,
    seed: u64,
) -> Result<f64> {
    if reps < MIN_BOOTSTRAP_REPS {
        return Err(Error::Precondition(format!("bootstrap needs at least {MIN_BOOTSTRAP_REPS} reps, got {reps}")));
    }
    let n = t.len();
    let draws: Vec<Option<f64>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_from_seed(derive_seed(seed, &[r as u64]));
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let tb: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
            let yb: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let vb = v.select_rows(&idx);
            let w = estimate_weights(estimator, &tb, &vb, kind, settings).ok()?;
            ace("", &tb, &yb, &w, kind, Some(estimator)).ok().map(|e| e.mu)
        })
        .collect();
    let ok: Vec<f64> = draws.into_iter().flatten().collect();
    let failed = reps - ok.len();
    if failed as f64 > MAX_BOOTSTRAP_FAILURES * reps as f64 || ok.len() < 2 {
        return Err(Error::BootstrapUnstable { failed, reps });
    }
    Ok(sample_sd(&ok))
}

/// Reject `H0: ACE = 0` iff `p < alpha`.
pub fn hypothesis_test(est: &EffectEstimate, alpha: f64) -> Result<bool> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParams(format!("alpha must be in (0, 1), got {alpha}")));
    }
    Ok(est.p_value < alpha)
}

/// Replaces the standard error of an estimate (and the p-value and interval built on it).
pub fn with_standard_error(est: &EffectEstimate, se: f64) -> EffectEstimate {
    let mut out = finish_estimate(&est.feature, est.mu, se, est.kind, est.estimator, est.n_eff);
    out.warnings = est.warnings.clone();
    out
}
