//! Minimum-dispersion balancing weights: the closest weights to uniform (in
//! squared distance) whose standardized treatment moments lie within `delta`.
//!
//! Solved through the dual. For multipliers `nu` (mean-one constraint) and
//! `m` (moment bounds), the primal minimizer is `w_i = max(0, 1 - s_i)` with
//! `s_i = nu + m . g_i / n`, and the dual objective to minimize is
//! `-sum_i psi(s_i) + n nu + delta |m|_1`, `psi(s) = s - s^2/2` for `s <= 1`,
//! `1/2` beyond. The `l1` term is handled by splitting `m = p - q`, `p, q >= 0`,
//! and running a projected Newton method on the bound-constrained problem.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{normalize_weights, WeightVector};
use crate::error::{Error, Result};
use crate::stats::{standardize, standardize_columns};

use super::balance::balance_from_slice;
use super::WeightingSettings;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptWeightParams {
    pub delta: f64,
    pub max_iter: usize,
    /// Tighten the moment bound until the weighted Pearson correlations
    /// between T and each covariate are also below `delta`.
    pub match_correlation: bool,
}

impl Default for OptWeightParams {
    fn default() -> Self {
        Self { delta: 0.1, max_iter: 1_000_000, match_correlation: true }
    }
}

/// Constraint slack accepted on the returned weights.
const SLACK: f64 = 1e-6;
/// Multiplier magnitude taken as evidence that the dual is unbounded.
const DIVERGED: f64 = 1e10;
/// Rounds of bound tightening when matching correlations.
const MAX_TIGHTENING: usize = 30;

/// Moment columns `T~` and `T~ V~_j`; each must satisfy `|E_w[g]| <= delta`.
pub fn optweight_moments(t: &[f64], v: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<String>)> {
    let ts = standardize(t).ok_or_else(|| Error::DegenerateTreatment("treatment is constant".into()))?;
    let (vs, kept) = standardize_columns(v);
    let n = t.len();
    let k = kept.len() + 1;
    let mut names = vec!["mean(T)".to_string()];
    names.extend(kept.iter().map(|j| format!("T*V{j}")));
    let g = DMatrix::from_fn(n, k, |i, c| if c == 0 { ts[i] } else { ts[i] * vs[(i, c - 1)] });
    Ok((g, names))
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub weights: Vec<f64>,
    pub moments: Vec<f64>,
    pub objective: f64,
    pub converged: bool,
    pub diverged: bool,
    pub iterations: usize,
}

struct Dual<'a> {
    /// Moment columns scaled by `1/n`.
    a: DMatrix<f64>,
    g: &'a DMatrix<f64>,
    delta: f64,
    /// Quadratic penalty on the multipliers (soft constraints).
    inv_rho: f64,
}

impl Dual<'_> {
    fn n(&self) -> usize {
        self.g.nrows()
    }

    fn k(&self) -> usize {
        self.g.ncols()
    }

    /// Splits z = (nu, p, q) into (nu, m).
    fn net(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        let k = self.k();
        let m = DVector::from_fn(k, |c, _| z[1 + c] - z[1 + k + c]);
        (z[0], m)
    }

    fn s(&self, z: &DVector<f64>) -> DVector<f64> {
        let (nu, m) = self.net(z);
        (&self.a * m).add_scalar(nu)
    }

    fn value(&self, z: &DVector<f64>) -> f64 {
        let k = self.k();
        let s = self.s(z);
        let psi: f64 = s.iter().map(|&x| if x <= 1.0 { x - 0.5 * x * x } else { 0.5 }).sum();
        let (nu, m) = self.net(z);
        let l1: f64 = (0..k).map(|c| z[1 + c] + z[1 + k + c]).sum();
        -psi + nu * self.n() as f64 + self.delta * l1 + 0.5 * self.inv_rho * m.norm_squared()
    }

    fn weights(&self, z: &DVector<f64>) -> Vec<f64> {
        self.s(z).iter().map(|&x| (1.0 - x).max(0.0)).collect()
    }

    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let k = self.k();
        let w = DVector::from_vec(self.weights(z));
        let (_, m) = self.net(z);
        let ew = self.a.transpose() * &w;
        let mut grad = DVector::zeros(1 + 2 * k);
        grad[0] = self.n() as f64 - w.sum();
        for c in 0..k {
            let pen = self.inv_rho * m[c];
            grad[1 + c] = -ew[c] + self.delta + pen;
            grad[1 + k + c] = ew[c] + self.delta - pen;
        }
        grad
    }

    /// Hessian in (nu, m) coordinates: sum over rows with positive weight of a_i a_i'.
    fn hessian_nm(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let k = self.k();
        let s = self.s(z);
        let mut h = DMatrix::zeros(k + 1, k + 1);
        let mut row = DVector::zeros(k + 1);
        for i in 0..self.n() {
            if s[i] < 1.0 {
                row[0] = 1.0;
                for c in 0..k {
                    row[1 + c] = self.a[(i, c)];
                }
                h.ger(1.0, &row, &row, 1.0);
            }
        }
        for c in 0..k {
            h[(1 + c, 1 + c)] += self.inv_rho;
        }
        h
    }
}

/// Keeps at most one of each (p_k, q_k) pair positive; never raises the dual objective.
fn net_out(z: &mut DVector<f64>, k: usize) {
    for c in 0..k {
        let m = z[1 + c] - z[1 + k + c];
        z[1 + c] = m.max(0.0);
        z[1 + k + c] = (-m).max(0.0);
    }
}

fn project(z: &mut DVector<f64>) {
    for v in z.iter_mut().skip(1) {
        *v = v.max(0.0);
    }
}

/// Projected-gradient stationarity measure, scaled per sample.
fn stationarity(z: &DVector<f64>, grad: &DVector<f64>, n: f64) -> f64 {
    let mut worst = (grad[0] / n).abs();
    for i in 1..z.len() {
        let step = z[i] - (z[i] - grad[i]).max(0.0);
        worst = worst.max(step.abs());
    }
    worst
}

/// Solves the balancing QP for moment columns `g` (rows are samples).
/// `penalty = Some(rho)` replaces the hard bounds by a quadratic penalty.
pub fn solve_optweight(g: &DMatrix<f64>, delta: f64, penalty: Option<f64>, max_iter: usize) -> QpSolution {
    let (n, k) = g.shape();
    let nf = n as f64;
    let dual = Dual { a: g / nf, g, delta, inv_rho: penalty.map_or(0.0, |rho| 1.0 / rho) };
    let mut z = DVector::<f64>::zeros(1 + 2 * k);
    let mut f = dual.value(&z);
    let mut iterations = 0;
    let mut converged = false;
    let mut diverged = false;
    let eps = 1e-12;
    while iterations < max_iter {
        let grad = dual.gradient(&z);
        if stationarity(&z, &grad, nf) < 1e-11 {
            converged = true;
            break;
        }
        if z.amax() > DIVERGED {
            diverged = true;
            break;
        }
        iterations += 1;

        // Free variables: nu always; a bound variable is fixed when it sits at
        // zero with a nonnegative gradient, and of a (p, q) pair at most one is free.
        let mut free = vec![0usize];
        for c in 0..k {
            let (ip, iq) = (1 + c, 1 + k + c);
            let p_free = z[ip] > eps || grad[ip] < 0.0;
            let q_free = z[iq] > eps || grad[iq] < 0.0;
            match (p_free, q_free) {
                (true, true) => free.push(if z[ip] >= z[iq] { ip } else { iq }),
                (true, false) => free.push(ip),
                (false, true) => free.push(iq),
                (false, false) => {}
            }
        }
        let h_nm = dual.hessian_nm(&z);
        let nfree = free.len();
        // Map each free split variable to its (nu, m) coordinate and sign.
        let coord = |idx: usize| -> (usize, f64) {
            if idx == 0 {
                (0, 1.0)
            } else if idx <= k {
                (idx, 1.0)
            } else {
                (idx - k, -1.0)
            }
        };
        let mut h = DMatrix::zeros(nfree, nfree);
        let mut gf = DVector::zeros(nfree);
        for (a, &ia) in free.iter().enumerate() {
            let (ca, sa) = coord(ia);
            gf[a] = grad[ia];
            for (b, &ib) in free.iter().enumerate() {
                let (cb, sb) = coord(ib);
                h[(a, b)] = sa * sb * h_nm[(ca, cb)];
            }
        }
        let scale = h.diagonal().amax().max(1.0);
        for a in 0..nfree {
            h[(a, a)] += 1e-10 * scale;
        }
        let step = match h.clone().cholesky() {
            Some(ch) => -ch.solve(&gf),
            None => -&gf / scale,
        };

        let mut accepted = false;
        for direction in [step.clone(), -&gf / scale] {
            let mut t = 1.0;
            for _ in 0..60 {
                let mut cand = z.clone();
                for (a, &ia) in free.iter().enumerate() {
                    cand[ia] += t * direction[a];
                }
                project(&mut cand);
                net_out(&mut cand, k);
                let fc = dual.value(&cand);
                let decrease = grad.dot(&(&z - &cand)).max(0.0);
                if fc.is_finite() && fc < f && fc <= f - 1e-4 * decrease {
                    z = cand;
                    f = fc;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if accepted {
                break;
            }
        }
        if !accepted {
            // No further descent available at machine precision.
            converged = stationarity(&z, &dual.gradient(&z), nf) < 1e-7;
            break;
        }
    }
    if !converged && z.amax() > DIVERGED {
        diverged = true;
    }
    let weights = dual.weights(&z);
    let wv = DVector::from_column_slice(&weights);
    let moments: Vec<f64> = (g.transpose() * &wv / nf).iter().copied().collect();
    let objective = weights.iter().map(|w| (w - 1.0) * (w - 1.0)).sum();
    QpSolution { weights, moments, objective, converged, diverged, iterations }
}

fn solve_checked(g: &DMatrix<f64>, names: &[String], delta: f64, max_iter: usize) -> Result<WeightVector> {
    let n = g.nrows() as f64;
    let sol = solve_optweight(g, delta, None, max_iter);
    let sum: f64 = sol.weights.iter().sum();
    let violated: Vec<String> = names
        .iter()
        .zip(&sol.moments)
        .filter(|(_, m)| m.abs() > delta + SLACK)
        .map(|(name, _)| name.clone())
        .collect();
    if sol.diverged || !violated.is_empty() || (sum - n).abs() > SLACK * n || sum <= 0.0 {
        let constraints = if violated.is_empty() { vec!["mean(w) = 1".to_string()] } else { violated };
        return Err(Error::Infeasible { constraints });
    }
    let mut w = normalize_weights(&sol.weights)?;
    if !sol.converged {
        w.warn(format!("OPTWEIGHT stopped after {} iterations before full convergence", sol.iterations));
    }
    Ok(w)
}

pub fn optweights(t: &[f64], v: &DMatrix<f64>, params: &OptWeightParams) -> Result<WeightVector> {
    if !(params.delta > 0.0) {
        return Err(Error::InvalidParams(format!("optweight delta must be > 0, got {}", params.delta)));
    }
    let (g, names) = optweight_moments(t, v)?;
    if params.delta.is_infinite() {
        return normalize_weights(&vec![1.0; t.len()]);
    }
    let mut w = solve_checked(&g, &names, params.delta, params.max_iter)?;
    if !params.match_correlation {
        return Ok(w);
    }
    let target = 0.99 * params.delta;
    let mut bound = params.delta;
    for _ in 0..MAX_TIGHTENING {
        let corr = balance_from_slice(t, v, &w.weights)?.max_abs_corr;
        if corr <= target {
            return Ok(w);
        }
        bound *= target / corr;
        match solve_checked(&g, &names, bound, params.max_iter) {
            Ok(next) => w = next,
            Err(Error::Infeasible { .. }) => break,
            Err(e) => return Err(e),
        }
    }
    let corr = balance_from_slice(t, v, &w.weights)?.max_abs_corr;
    if corr > params.delta {
        w.warn(format!("OPTWEIGHT weighted correlation {corr:.3} still exceeds delta {}", params.delta));
    }
    Ok(w)
}

/// OPTWEIGHT with the moment bounds enforced by a quadratic penalty instead
/// of hard constraints; always solvable.
pub fn optweights_relaxed(t: &[f64], v: &DMatrix<f64>, settings: &WeightingSettings) -> Result<WeightVector> {
    let params = &settings.optweight;
    let (g, _) = optweight_moments(t, v)?;
    let delta = if params.delta.is_finite() { params.delta } else { 0.0 };
    let rho = settings.relax_penalty * t.len() as f64;
    let sol = solve_optweight(&g, delta, Some(rho), params.max_iter);
    let worst = sol.moments.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
    let mut w = normalize_weights(&sol.weights)?;
    w.warn(format!(
        "OPTWEIGHT constraints infeasible at delta {}; used penalized balancing (largest moment {worst:.3})",
        params.delta
    ));
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_independent, gen_linear_scm, LinearScmConfig};
    use crate::weighting::balance::balance_from_slice;

    /// Exhaustive search over the simplex {w >= 0, sum w = n} for n = 4,
    /// refined by zooming around the incumbent.
    fn simplex_oracle(g: &DMatrix<f64>, delta: f64) -> f64 {
        let n = g.nrows();
        assert_eq!(n, 4);
        let feasible = |w: &[f64; 4]| {
            (0..g.ncols()).all(|c| ((0..4).map(|i| w[i] * g[(i, c)]).sum::<f64>() / 4.0).abs() <= delta + 1e-12)
        };
        let obj = |w: &[f64; 4]| w.iter().map(|x| (x - 1.0) * (x - 1.0)).sum::<f64>();
        let mut best: Option<([f64; 4], f64)> = None;
        let mut lo = [0.0; 3];
        let mut steps = 200;
        let mut h = 4.0 / steps as f64;
        let mut radius = 1.0;
        for _ in 0..40 {
            for a in 0..=steps {
                for b in 0..=steps {
                    for c in 0..=steps {
                        let w0 = lo[0] + a as f64 * h;
                        let w1 = lo[1] + b as f64 * h;
                        let w2 = lo[2] + c as f64 * h;
                        let w = [w0, w1, w2, 4.0 - w0 - w1 - w2];
                        if w.iter().any(|x| *x < 0.0) || !feasible(&w) {
                            continue;
                        }
                        let o = obj(&w);
                        if best.is_none_or(|(_, bo)| o < bo) {
                            best = Some((w, o));
                        }
                    }
                }
            }
            let (bw, _) = best.expect("grid found no feasible point");
            // Zoom: a grid over a shrinking box around the incumbent.
            steps = 40;
            h = 2.0 * radius / steps as f64;
            lo = [bw[0] - radius, bw[1] - radius, bw[2] - radius];
            radius *= 0.7;
        }
        best.unwrap().1
    }

    #[test]
    fn four_sample_simplex_oracle() {
        let t = [0.0, 1.0, 3.0, 4.0];
        let v = DMatrix::from_column_slice(4, 1, &[2.0, 0.0, 1.0, 3.0]);
        let (g, _) = optweight_moments(&t, &v).unwrap();
        let sol = solve_optweight(&g, 0.1, None, 10_000);
        assert!(sol.converged);
        let oracle = simplex_oracle(&g, 0.1);
        assert!(oracle > 0.01, "constraints should bind: {oracle}");
        assert!((sol.objective - oracle).abs() < 1e-3, "{} vs {}", sol.objective, oracle);
        for m in &sol.moments {
            assert!(m.abs() <= 0.1 + 1e-6);
        }
        let params = OptWeightParams { match_correlation: false, ..Default::default() };
        let w = optweights(&t, &v, &params).unwrap();
        let obj: f64 = w.weights.iter().map(|x| (x - 1.0) * (x - 1.0)).sum();
        assert!((obj - oracle).abs() < 1e-3);
    }

    #[test]
    fn four_sample_with_zero_weight_corner() {
        let t = [0.0, 1.0, 2.0, 6.0];
        let v = DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 3.0, 6.0]);
        let (g, _) = optweight_moments(&t, &v).unwrap();
        let sol = solve_optweight(&g, 0.1, None, 10_000);
        let oracle = simplex_oracle(&g, 0.1);
        assert!((sol.objective - oracle).abs() < 1e-3, "{} vs {} {:?}", sol.objective, oracle, sol.weights);
    }

    #[test]
    fn balanced_data_returns_ones() {
        let t = [-1.0, 1.0, -1.0, 1.0];
        let v = DMatrix::from_column_slice(4, 1, &[-1.0, -1.0, 1.0, 1.0]);
        let w = optweights(&t, &v, &OptWeightParams::default()).unwrap();
        assert!(w.weights.iter().all(|x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn infinite_delta_is_uniform() {
        let s = gen_linear_scm(&LinearScmConfig { n: 200, seed: 1, ..Default::default() }).unwrap();
        let (t, v) = s.dataset.select_treatment("T").unwrap();
        let w = optweights(&t, &v, &OptWeightParams { delta: f64::INFINITY, ..Default::default() }).unwrap();
        assert!(w.weights.iter().all(|&x| x == 1.0));
        let w = optweights(&t, &v, &OptWeightParams { delta: 1e6, ..Default::default() }).unwrap();
        assert!(w.weights.iter().all(|x| (x - 1.0).abs() < 1e-9));
    }

    #[test]
    fn balances_confounded_scm() {
        let s = gen_linear_scm(&LinearScmConfig { n: 2000, seed: 6, ..Default::default() }).unwrap();
        let (t, v) = s.dataset.select_treatment("T").unwrap();
        let w = optweights(&t, &v, &OptWeightParams::default()).unwrap();
        let (g, _) = optweight_moments(&t, &v).unwrap();
        for c in 0..g.ncols() {
            let m: f64 = (0..2000).map(|i| w.weights[i] * g[(i, c)]).sum::<f64>() / 2000.0;
            assert!(m.abs() <= 0.1 + 1e-6, "{m}");
        }
        let b = balance_from_slice(&t, &v, &w.weights).unwrap();
        assert!(b.max_abs_corr < 0.1, "{}", b.max_abs_corr);
    }

    #[test]
    fn independent_data_feasible_at_start() {
        let d = gen_independent(2000, 3, 8).unwrap();
        let (t, v) = d.select_treatment("f1").unwrap();
        let (g, _) = optweight_moments(&t, &v).unwrap();
        for c in 0..g.ncols() {
            assert!(g.column(c).mean().abs() < 0.1);
        }
        let w = optweights(&t, &v, &OptWeightParams::default()).unwrap();
        assert!(w.weights.iter().all(|x| (x - 1.0).abs() < 1e-9));
    }

    #[test]
    fn infeasible_names_constraint() {
        let t = [1.0, 2.0, 4.0, 5.0];
        let v = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 4.0, 5.0]);
        match optweights(&t, &v, &OptWeightParams::default()) {
            Err(Error::Infeasible { constraints }) => assert!(constraints.iter().any(|c| c == "T*V0"), "{constraints:?}"),
            other => panic!("expected infeasible, got {other:?}"),
        }
        let w = optweights_relaxed(&t, &v, &WeightingSettings::default()).unwrap();
        assert!((w.weights.iter().sum::<f64>() - 4.0).abs() < 1e-9);
    }
}
