//! Nonparametric covariate balancing by entropy balancing: the maximum-entropy
//! weights under moment constraints, found by Newton iterations on the dual.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{normalize_weights, WeightVector};
use crate::error::{Error, Result};
use crate::stats::{standardize, standardize_columns};

use super::WeightingSettings;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NpcbpsParams {
    /// Also hold the weighted means of the standardized treatment and covariates
    /// at zero, so the cross-moments are weighted covariances.
    pub balance_means: bool,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NpcbpsParams {
    fn default() -> Self {
        Self { balance_means: true, tol: 1e-6, max_iter: 200 }
    }
}

/// Moment functions whose weighted means are driven to zero, one column each.
pub fn npcbps_moments(t: &[f64], v: &DMatrix<f64>, balance_means: bool) -> Result<(DMatrix<f64>, Vec<String>)> {
    let ts = standardize(t).ok_or_else(|| Error::DegenerateTreatment("treatment is constant".into()))?;
    let (vs, kept) = standardize_columns(v);
    let n = t.len();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    if balance_means {
        cols.push(ts.clone());
        names.push("mean(T)".to_string());
        for (c, &j) in kept.iter().enumerate() {
            cols.push(vs.column(c).iter().copied().collect());
            names.push(format!("mean(V{j})"));
        }
    }
    for (c, &j) in kept.iter().enumerate() {
        cols.push((0..n).map(|i| ts[i] * vs[(i, c)]).collect());
        names.push(format!("T*V{j}"));
    }
    let g = DMatrix::from_fn(n, cols.len(), |i, k| cols[k][i]);
    Ok((g, names))
}

#[derive(Debug, Clone)]
pub struct DualSolution {
    pub lambda: Vec<f64>,
    /// Weights with mean 1.
    pub weights: Vec<f64>,
    /// Weighted means of the moment columns at the solution.
    pub moments: Vec<f64>,
    pub iterations: usize,
}

fn softmax_weights(g: &DMatrix<f64>, lambda: &DVector<f64>) -> (Vec<f64>, f64) {
    let eta = g * lambda;
    let max = eta.max();
    let e: Vec<f64> = eta.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    let n = e.len() as f64;
    let log_mean = max + (s / n).ln();
    (e.iter().map(|x| x * n / s).collect(), log_mean)
}

/// Dual objective `log mean exp(G lambda) + |lambda|^2 / (2 rho)`.
pub fn entropy_dual(g: &DMatrix<f64>, lambda: &[f64], penalty: Option<f64>) -> f64 {
    let lam = DVector::from_column_slice(lambda);
    let (_, log_mean) = softmax_weights(g, &lam);
    log_mean + penalty.map_or(0.0, |rho| lam.norm_squared() / (2.0 * rho))
}

/// Newton's method on the entropy-balancing dual. With `penalty = Some(rho)`
/// the constraints are softened to a quadratic penalty of strength `rho`.
pub fn solve_entropy_dual(g: &DMatrix<f64>, penalty: Option<f64>, tol: f64, max_iter: usize) -> DualSolution {
    let (n, k) = g.shape();
    let mut lambda = DVector::<f64>::zeros(k);
    let mut iterations = 0;
    let eval = |lam: &DVector<f64>| {
        let (w, log_mean) = softmax_weights(g, lam);
        (w, log_mean + penalty.map_or(0.0, |rho| lam.norm_squared() / (2.0 * rho)))
    };
    let (mut w, mut f) = eval(&lambda);
    loop {
        let wv = DVector::from_column_slice(&w);
        let moments = g.transpose() * &wv / n as f64;
        let mut grad = moments.clone();
        if let Some(rho) = penalty {
            grad += &lambda / rho;
        }
        if grad.amax() < tol * 1e-3 || iterations >= max_iter {
            return DualSolution {
                lambda: lambda.iter().copied().collect(),
                weights: w,
                moments: moments.iter().copied().collect(),
                iterations,
            };
        }
        iterations += 1;
        // Hessian: weighted covariance of the moment columns.
        let mut centred = g.clone();
        for c in 0..k {
            let m = moments[c];
            for i in 0..n {
                centred[(i, c)] = (centred[(i, c)] - m) * (w[i] / n as f64).sqrt();
            }
        }
        let mut hess = centred.transpose() * &centred;
        let ridge = penalty.map_or(0.0, |rho| 1.0 / rho) + 1e-12 * (1.0 + hess.trace() / k as f64);
        for c in 0..k {
            hess[(c, c)] += ridge;
        }
        let step = match hess.cholesky() {
            Some(ch) => -ch.solve(&grad),
            None => -&grad,
        };
        let slope = step.dot(&grad);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand = &lambda + t * &step;
            let (wc, fc) = eval(&cand);
            if fc.is_finite() && fc <= f + 1e-4 * t * slope {
                lambda = cand;
                w = wc;
                f = fc;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            iterations = max_iter;
        }
    }
}

pub fn npcbps_weights(t: &[f64], v: &DMatrix<f64>, settings: &WeightingSettings) -> Result<WeightVector> {
    let p = &settings.npcbps;
    let (g, names) = npcbps_moments(t, v, p.balance_means)?;
    if g.ncols() == 0 {
        return normalize_weights(&vec![1.0; t.len()]);
    }
    let sol = solve_entropy_dual(&g, None, p.tol, p.max_iter);
    let worst = sol.moments.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
    let mut w = normalize_weights(&sol.weights)?;
    if worst < p.tol {
        return Ok(w);
    }
    if worst < 10.0 * p.tol {
        w.warn(format!("NPCBPS balance reached only the relaxed tolerance {:.0e}", 10.0 * p.tol));
        return Ok(w);
    }
    let violated = names
        .into_iter()
        .zip(&sol.moments)
        .filter(|(_, m)| m.abs() >= 10.0 * p.tol)
        .map(|(name, _)| name)
        .collect();
    Err(Error::Infeasible { constraints: violated })
}

/// Entropy balancing with the moment constraints replaced by a quadratic
/// penalty; always solvable.
pub fn npcbps_relaxed_weights(t: &[f64], v: &DMatrix<f64>, settings: &WeightingSettings) -> Result<WeightVector> {
    let p = &settings.npcbps;
    let (g, _) = npcbps_moments(t, v, p.balance_means)?;
    if g.ncols() == 0 {
        return normalize_weights(&vec![1.0; t.len()]);
    }
    let sol = solve_entropy_dual(&g, Some(settings.relax_penalty), p.tol, p.max_iter);
    let worst = sol.moments.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
    let mut w = normalize_weights(&sol.weights)?;
    w.warn(format!(
        "NPCBPS constraints infeasible; used penalized balancing (largest residual moment {worst:.3})"
    ));
    Ok(w)
}
