//! Stabilized density-ratio weights: IPTW (linear / logistic), PSWGBM and SUPER.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{normalize_weights, FeatureKind, WeightVector};
use crate::error::{Error, Result};
use crate::stats::{column, mean, midranks, sample_sd};
use crate::treatment::{
    conditional_density, fit_gbm_path, fit_logistic, fit_ols, fit_superlearner, floor_sd, TreatmentModel,
};

use super::balance::mean_abs_spearman;
use super::trim::weight_trim;
use super::WeightingSettings;

/// Propensity clip for regressors that are not probability models.
const PROPENSITY_CLIP: f64 = 0.01;
/// Fraction of samples below the density floor that triggers a warning.
const POSITIVITY_WARN_FRACTION: f64 = 0.05;

fn log_normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln()
}

/// Raw (unnormalized) stabilized weights `N(t; m, s) / N(t; pred_i, sd)`,
/// evaluated in log space.
pub fn density_ratio(t: &[f64], pred: &[f64], sd: f64, marginal_mean: f64, marginal_sd: f64) -> Vec<f64> {
    t.iter()
        .zip(pred)
        .map(|(&ti, &pi)| (log_normal_pdf(ti, marginal_mean, marginal_sd) - log_normal_pdf(ti, pi, sd)).exp())
        .collect()
}

/// Raw weights `P(T = t_i) / P(T = t_i | V_i)` for a 0/1 treatment.
pub fn binary_ratio(t: &[f64], propensity: &[f64]) -> Vec<f64> {
    let p1 = mean(t);
    t.iter()
        .zip(propensity)
        .map(|(&ti, &p)| if ti > 0.5 { p1 / p } else { (1.0 - p1) / (1.0 - p) })
        .collect()
}

fn check_binary(t: &[f64]) -> Result<()> {
    let ones = t.iter().filter(|&&x| x > 0.5).count();
    if ones == 0 || ones == t.len() {
        return Err(Error::DegenerateTreatment("binary treatment has a single level".into()));
    }
    Ok(())
}

fn check_continuous(t: &[f64]) -> Result<()> {
    if !(sample_sd(t) > 0.0) {
        return Err(Error::DegenerateTreatment("treatment is constant".into()));
    }
    Ok(())
}

/// Raw stabilized weights for a continuous treatment under a fitted Gaussian model.
pub fn model_ratio(t: &[f64], v: &DMatrix<f64>, model: &TreatmentModel) -> Result<Vec<f64>> {
    let sd = model
        .residual_sd
        .ok_or_else(|| Error::WrongKind(format!("{:?}", model.kind()).to_lowercase()))?;
    Ok(density_ratio(t, &model.predict(v), sd, mean(t), sample_sd(t)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositivityDiagnostic {
    pub floor: f64,
    pub fraction_below: f64,
    pub flagged: bool,
}

/// Fraction of samples whose conditional density at the observed treatment is below `floor`.
pub fn positivity_check(t: &[f64], v: &DMatrix<f64>, model: &TreatmentModel, floor: f64) -> Result<PositivityDiagnostic> {
    let mut below = 0usize;
    for (i, &ti) in t.iter().enumerate() {
        let row: Vec<f64> = v.row(i).iter().copied().collect();
        if conditional_density(model, &row, ti)? < floor {
            below += 1;
        }
    }
    let fraction_below = if t.is_empty() { 0.0 } else { below as f64 / t.len() as f64 };
    Ok(PositivityDiagnostic { floor, fraction_below, flagged: fraction_below > POSITIVITY_WARN_FRACTION })
}

fn positivity_warning(t: &[f64], v: &DMatrix<f64>, model: &TreatmentModel, settings: &WeightingSettings) -> Result<Option<String>> {
    let floor = settings.positivity_floor / sample_sd(t);
    let d = positivity_check(t, v, model, floor)?;
    Ok(d.flagged.then(|| {
        format!(
            "positivity: {:.1}% of samples have conditional density below {:.3e}",
            100.0 * d.fraction_below,
            d.floor
        )
    }))
}

fn finish(raw: &[f64], warning: Option<String>, settings: &WeightingSettings) -> Result<WeightVector> {
    let mut w = normalize_weights(raw)?;
    if let Some(msg) = warning {
        w.warn(msg);
    }
    match settings.trim_percentile {
        Some(p) => weight_trim(&w, p),
        None => Ok(w),
    }
}

fn clip_propensity(p: &[f64]) -> Vec<f64> {
    p.iter().map(|x| x.clamp(PROPENSITY_CLIP, 1.0 - PROPENSITY_CLIP)).collect()
}

pub fn iptw_weights(t: &[f64], v: &DMatrix<f64>, kind: FeatureKind, settings: &WeightingSettings) -> Result<WeightVector> {
    match kind {
        FeatureKind::Continuous => {
            check_continuous(t)?;
            let model = fit_ols(v, t)?;
            let warning = positivity_warning(t, v, &model, settings)?;
            finish(&model_ratio(t, v, &model)?, warning, settings)
        }
        FeatureKind::Binary => {
            check_binary(t)?;
            let model = fit_logistic(v, t)?;
            finish(&binary_ratio(t, &model.predict(v)), None, settings)
        }
    }
}

pub fn super_weights(t: &[f64], v: &DMatrix<f64>, kind: FeatureKind, settings: &WeightingSettings) -> Result<WeightVector> {
    match kind {
        FeatureKind::Continuous => {
            check_continuous(t)?;
            let model = fit_superlearner(v, t, settings.superlearner_folds)?;
            let warning = positivity_warning(t, v, &model, settings)?;
            finish(&model_ratio(t, v, &model)?, warning, settings)
        }
        FeatureKind::Binary => {
            check_binary(t)?;
            let model = fit_superlearner(v, t, settings.superlearner_folds)?;
            finish(&binary_ratio(t, &clip_propensity(&model.predict(v))), None, settings)
        }
    }
}

/// Chooses the number of boosting stages along `settings.pswgbm_grid` that
/// minimizes the mean absolute weighted Spearman correlation.
pub fn pswgbm_weights(t: &[f64], v: &DMatrix<f64>, kind: FeatureKind, settings: &WeightingSettings) -> Result<WeightVector> {
    match kind {
        FeatureKind::Continuous => check_continuous(t)?,
        FeatureKind::Binary => check_binary(t)?,
    }
    let mut grid = settings.pswgbm_grid.clone();
    grid.sort_unstable();
    grid.dedup();
    if grid.is_empty() || grid[0] == 0 {
        return Err(Error::InvalidParams("pswgbm grid must be nonempty positive tree counts".into()));
    }
    let mut params = settings.gbm;
    params.n_trees = *grid.last().unwrap();
    let (_, snapshots) = fit_gbm_path(v, t, &params, &grid)?;

    let t_ranks = midranks(t);
    let v_ranks: Vec<Vec<f64>> = (0..v.ncols()).map(|j| midranks(&column(v, j))).collect();
    let (m, s) = (mean(t), sample_sd(t));
    let n = t.len() as f64;
    let mut best: Option<(f64, usize, WeightVector)> = None;
    for (&stages, pred) in grid.iter().zip(&snapshots) {
        let raw = match kind {
            FeatureKind::Continuous => {
                let rss: f64 = t.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum();
                density_ratio(t, pred, floor_sd((rss / n).sqrt(), t), m, s)
            }
            FeatureKind::Binary => binary_ratio(t, &clip_propensity(pred)),
        };
        let w = finish(&raw, None, settings)?;
        let score = mean_abs_spearman(&t_ranks, &v_ranks, &w.weights);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, stages, w));
        }
    }
    let (_, _, w) = best.expect("grid is nonempty");
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::synth::{gen_independent, gen_linear_scm, LinearScmConfig};
    use crate::weighting::balance::balance_from_slice;

    #[test]
    fn ratio_identity_is_exact() {
        let t = [0.3, -1.2, 2.5, 0.0];
        let pred = [0.4; 4];
        let w = density_ratio(&t, &pred, 1.7, 0.4, 1.7);
        assert!(w.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn zero_coefficient_model_gives_unit_weights() {
        // With no covariates the OLS model is the fitted marginal.
        let t = [0.5, 1.5, -0.25, 3.0, 2.0];
        let v = DMatrix::<f64>::zeros(5, 0);
        let model = fit_ols(&v, &t).unwrap();
        let raw = model_ratio(&t, &v, &model).unwrap();
        assert!(raw.iter().all(|&x| x == 1.0), "{raw:?}");
    }

    #[test]
    fn independent_treatment_near_uniform() {
        let d = gen_independent(2000, 4, 11).unwrap();
        let (t, v) = d.select_treatment("f1").unwrap();
        let w = iptw_weights(&t, &v, FeatureKind::Continuous, &WeightingSettings::default()).unwrap();
        let within = w.weights.iter().filter(|x| (*x - 1.0).abs() < 0.1).count();
        assert!(within as f64 >= 0.95 * 2000.0, "{within}");
        let s = super_weights(&t, &v, FeatureKind::Continuous, &WeightingSettings::default()).unwrap();
        let within = s.weights.iter().filter(|x| (*x - 1.0).abs() < 0.1).count();
        assert!(within as f64 >= 0.9 * 2000.0, "{within}");
        let g = pswgbm_weights(&t, &v, FeatureKind::Continuous, &WeightingSettings::default()).unwrap();
        let b = balance_from_slice(&t, &v, &g.weights).unwrap();
        assert!(b.mean_abs_spearman < 0.05);
    }

    #[test]
    fn super_tracks_iptw_on_linear_truth() {
        let s = gen_linear_scm(&LinearScmConfig { n: 2000, seed: 5, ..Default::default() }).unwrap();
        let (t, v) = s.dataset.select_treatment("T").unwrap();
        let settings = WeightingSettings::default();
        let a = iptw_weights(&t, &v, FeatureKind::Continuous, &settings).unwrap();
        let b = super_weights(&t, &v, FeatureKind::Continuous, &settings).unwrap();
        let mard = a.weights.iter().zip(&b.weights).map(|(x, y)| ((y - x) / x).abs()).sum::<f64>() / 2000.0;
        assert!(mard < 0.2, "{mard}");
    }

    #[test]
    fn pswgbm_improves_spearman_balance() {
        let s = gen_linear_scm(&LinearScmConfig { n: 2000, seed: 9, ..Default::default() }).unwrap();
        let (t, v) = s.dataset.select_treatment("T").unwrap();
        let w = pswgbm_weights(&t, &v, FeatureKind::Continuous, &WeightingSettings::default()).unwrap();
        let b = balance_from_slice(&t, &v, &w.weights).unwrap();
        assert!(b.mean_abs_spearman < b.mean_abs_spearman_unweighted);
        assert!(b.max_abs_corr < b.max_abs_corr_unweighted);
    }

    #[test]
    fn positivity_cases() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rng_from_seed(3);
        let n = 500;
        let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut t: Vec<f64> = x
            .iter()
            .map(|xi| {
                let e: f64 = StandardNormal.sample(&mut rng);
                xi + 0.5 * e
            })
            .collect();
        let v = DMatrix::from_column_slice(n, 1, &x);
        let model = fit_ols(&v, &t).unwrap();
        let d = positivity_check(&t, &v, &model, 1e-6).unwrap();
        assert_eq!(d.fraction_below, 0.0);
        assert!(!d.flagged);
        assert_eq!(positivity_check(&t, &v, &model, 0.0).unwrap().fraction_below, 0.0);

        let sd = model.residual_sd.unwrap();
        for ti in t.iter_mut().take(40) {
            *ti += 10.0 * sd;
        }
        let d = positivity_check(&t, &v, &model, 1e-6).unwrap();
        assert!(d.flagged, "{d:?}");
    }

    #[test]
    fn binary_iptw_balances_logistic_confounding() {
        let s = crate::synth::gen_binary_scm(&crate::synth::BinaryScmConfig { n: 3000, seed: 4, ..Default::default() })
            .unwrap();
        let (t, v) = s.dataset.select_treatment("T").unwrap();
        let w = iptw_weights(&t, &v, FeatureKind::Binary, &WeightingSettings::default()).unwrap();
        let b = balance_from_slice(&t, &v, &w.weights).unwrap();
        assert!(b.max_abs_corr < 0.5 * b.max_abs_corr_unweighted, "{b:?}");
    }

    #[test]
    fn single_level_binary_is_an_error() {
        let v = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        assert!(iptw_weights(&[1.0; 4], &v, FeatureKind::Binary, &WeightingSettings::default()).is_err());
    }
}
