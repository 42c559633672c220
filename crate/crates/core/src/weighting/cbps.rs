//! Covariate balancing propensity score: a parametric treatment model whose
//! parameters trade off likelihood fit against the balance of the implied weights.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::blackbox::sigmoid;
use crate::data::{normalize_weights, FeatureKind, WeightVector};
use crate::error::{Error, Result};
use crate::optim::bfgs;
use crate::stats::{mean, standardize, standardize_columns};
use crate::treatment::{fit_logistic, fit_ols, Fitted};

use super::trim::weight_trim;
use super::WeightingSettings;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CbpsParams {
    /// Weight of the likelihood score term relative to the balance term.
    pub score_weight: f64,
    pub max_iter: usize,
}

impl Default for CbpsParams {
    fn default() -> Self {
        Self { score_weight: 0.1, max_iter: 500 }
    }
}

struct Problem {
    t: Vec<f64>,
    v: DMatrix<f64>,
    kind: FeatureKind,
    /// Marginal P(T = 1) for binary treatments.
    p1: f64,
    /// Standardized treatment used in the balance moments.
    t_std: Vec<f64>,
    score_weight: f64,
}

impl Problem {
    fn linear(&self, theta: &[f64], i: usize) -> f64 {
        let mut s = theta[0];
        for j in 0..self.v.ncols() {
            s += theta[1 + j] * self.v[(i, j)];
        }
        s
    }

    /// Log of the unnormalized stabilized weights.
    fn log_weights(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.t.len();
        match self.kind {
            FeatureKind::Continuous => {
                let log_sd = theta[1 + self.v.ncols()];
                let sd = log_sd.exp();
                (0..n)
                    .map(|i| {
                        let t = self.t[i];
                        let z = (t - self.linear(theta, i)) / sd;
                        -0.5 * t * t + 0.5 * z * z + log_sd
                    })
                    .collect()
            }
            FeatureKind::Binary => (0..n)
                .map(|i| {
                    let p = sigmoid(self.linear(theta, i));
                    if self.t[i] > 0.5 {
                        (self.p1 / p).ln()
                    } else {
                        ((1.0 - self.p1) / (1.0 - p)).ln()
                    }
                })
                .collect(),
        }
    }

    fn weights(&self, theta: &[f64]) -> Vec<f64> {
        let lw = self.log_weights(theta);
        let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        lw.iter().map(|l| (l - max).exp()).collect()
    }

    fn balance(&self, w: &[f64]) -> Vec<f64> {
        let sw: f64 = w.iter().sum();
        let et = w.iter().zip(&self.t_std).map(|(a, b)| a * b).sum::<f64>() / sw;
        (0..self.v.ncols())
            .map(|j| {
                let col = self.v.column(j);
                let ex = w.iter().zip(col.iter()).map(|(a, b)| a * b).sum::<f64>() / sw;
                let etx = (0..w.len()).map(|i| w[i] * self.t_std[i] * col[i]).sum::<f64>() / sw;
                etx - et * ex
            })
            .collect()
    }

    fn score(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.t.len();
        let m = self.v.ncols();
        let mut s = vec![0.0; m + 1 + usize::from(self.kind == FeatureKind::Continuous)];
        let (resid, scale): (Vec<f64>, f64) = match self.kind {
            FeatureKind::Continuous => {
                let sd = theta[1 + m].exp();
                ((0..n).map(|i| (self.t[i] - self.linear(theta, i)) / sd).collect(), 1.0 / sd)
            }
            FeatureKind::Binary => ((0..n).map(|i| self.t[i] - sigmoid(self.linear(theta, i))).collect(), 1.0),
        };
        for i in 0..n {
            s[0] += resid[i] * scale;
            for j in 0..m {
                s[1 + j] += resid[i] * scale * self.v[(i, j)];
            }
            if self.kind == FeatureKind::Continuous {
                s[1 + m] += resid[i] * resid[i] - 1.0;
            }
        }
        s.iter().map(|x| x / n as f64).collect()
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        let w = self.weights(theta);
        let b: f64 = self.balance(&w).iter().map(|x| x * x).sum();
        let s: f64 = self.score(theta).iter().map(|x| x * x).sum();
        b + self.score_weight * s
    }
}

pub fn cbps_weights(t: &[f64], v: &DMatrix<f64>, kind: FeatureKind, settings: &WeightingSettings) -> Result<WeightVector> {
    let params = &settings.cbps;
    let (vs, _) = standardize_columns(v);
    let t_std = standardize(t).ok_or_else(|| Error::DegenerateTreatment("treatment is constant".into()))?;
    let (problem, start) = match kind {
        FeatureKind::Continuous => {
            let ols = fit_ols(&vs, &t_std)?;
            let Fitted::Linear { intercept, coef } = &ols.fitted else { unreachable!() };
            let mut start = vec![*intercept];
            start.extend(coef);
            start.push(ols.residual_sd.unwrap_or(1.0).ln());
            let p = Problem { t: t_std.clone(), v: vs, kind, p1: 0.0, t_std, score_weight: params.score_weight };
            (p, start)
        }
        FeatureKind::Binary => {
            let logit = fit_logistic(&vs, t)?;
            let Fitted::Logistic { intercept, coef } = &logit.fitted else { unreachable!() };
            let mut start = vec![*intercept];
            start.extend(coef);
            let p = Problem { t: t.to_vec(), v: vs, kind, p1: mean(t), t_std, score_weight: params.score_weight };
            (p, start)
        }
    };
    let min = bfgs(|th| problem.loss(th), &start, params.max_iter, 1e-8);
    let mut w = normalize_weights(&problem.weights(&min.x))?;
    if !min.converged {
        w.warn(format!(
            "CBPS optimizer did not converge after {} iterations; using best iterate (loss {:.3e})",
            min.iterations, min.value
        ));
    }
    match settings.trim_percentile {
        Some(p) => weight_trim(&w, p),
        None => Ok(w),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_binary_scm, gen_independent, gen_linear_scm, BinaryScmConfig, LinearScmConfig};
    use crate::weighting::balance::balance_from_slice;

    #[test]
    fn balanced_data_stays_near_uniform() {
        let d = gen_independent(2000, 3, 21).unwrap();
        let (t, v) = d.select_treatment("f1").unwrap();
        let w = cbps_weights(&t, &v, FeatureKind::Continuous, &WeightingSettings::default()).unwrap();
        let within = w.weights.iter().filter(|x| (*x - 1.0).abs() < 0.15).count();
        assert!(within as f64 >= 0.95 * 2000.0, "{within}");
        let b = balance_from_slice(&t, &v, &w.weights).unwrap();
        assert!(b.max_abs_corr < 0.05, "{}", b.max_abs_corr);
    }

    #[test]
    fn removes_linear_confounding() {
        let s = gen_linear_scm(&LinearScmConfig { n: 2000, seed: 2, ..Default::default() }).unwrap();
        let (t, v) = s.dataset.select_treatment("T").unwrap();
        let w = cbps_weights(&t, &v, FeatureKind::Continuous, &WeightingSettings::default()).unwrap();
        let b = balance_from_slice(&t, &v, &w.weights).unwrap();
        assert!((b.max_abs_corr_unweighted - 0.625).abs() < 0.03, "{}", b.max_abs_corr_unweighted);
        assert!(b.max_abs_corr < 0.1, "{}", b.max_abs_corr);
        assert!(w.warnings.is_empty(), "{:?}", w.warnings);
    }

    #[test]
    fn binary_treatment() {
        let s = gen_binary_scm(&BinaryScmConfig { n: 2000, seed: 8, ..Default::default() }).unwrap();
        let (t, v) = s.dataset.select_treatment("T").unwrap();
        let w = cbps_weights(&t, &v, FeatureKind::Binary, &WeightingSettings::default()).unwrap();
        let b = balance_from_slice(&t, &v, &w.weights).unwrap();
        assert!(b.max_abs_corr < 0.1, "{b:?}");
    }

    #[test]
    fn loss_is_score_free_at_mle_for_independent_data() {
        let d = gen_independent(300, 2, 4).unwrap();
        let (t, v) = d.select_treatment("f2").unwrap();
        let (vs, _) = standardize_columns(&v);
        let ts = standardize(&t).unwrap();
        let ols = fit_ols(&vs, &ts).unwrap();
        let Fitted::Linear { intercept, coef } = ols.fitted else { panic!() };
        let p = Problem { t: ts.clone(), v: vs, kind: FeatureKind::Continuous, p1: 0.0, t_std: ts, score_weight: 0.1 };
        // OLS residual sd uses n - m - 1, so only the location score vanishes exactly.
        let theta = [intercept, coef[0], ols.residual_sd.unwrap().ln()];
        let s = p.score(&theta);
        assert!(s[0].abs() < 1e-12 && s[1].abs() < 1e-12, "{s:?}");
    }
}
