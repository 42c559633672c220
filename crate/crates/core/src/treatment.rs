//! Regressors for the treatment given the covariates, `E[T | V]` (or
//! `P(T = 1 | V)`), and the Gaussian conditional density built on top of them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::blackbox::sigmoid;
use crate::error::{Error, Result};
use crate::stats::{mean, normal_pdf, sample_sd};

/// L2 penalty on the logistic slopes (mean log-likelihood scale).
pub const LOGISTIC_L2: f64 = 1e-4;
/// Residual sd floor relative to `sd(T)`.
pub const RESIDUAL_SD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreatmentModelKind {
    Ols,
    Logistic,
    Gbm,
    Knn,
    SuperLearner,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Fitted {
    Linear { intercept: f64, coef: Vec<f64> },
    Logistic { intercept: f64, coef: Vec<f64> },
    Gbm(GbmModel),
    Knn(KnnModel),
    Super(SuperLearner),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentModel {
    pub fitted: Fitted,
    /// Homoskedastic residual sd; `None` for the logistic model.
    pub residual_sd: Option<f64>,
}

impl TreatmentModel {
    pub fn kind(&self) -> TreatmentModelKind {
        match self.fitted {
            Fitted::Linear { .. } => TreatmentModelKind::Ols,
            Fitted::Logistic { .. } => TreatmentModelKind::Logistic,
            Fitted::Gbm(_) => TreatmentModelKind::Gbm,
            Fitted::Knn(_) => TreatmentModelKind::Knn,
            Fitted::Super(_) => TreatmentModelKind::SuperLearner,
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        match &self.fitted {
            Fitted::Linear { intercept, coef } => intercept + dot(coef, row),
            Fitted::Logistic { intercept, coef } => sigmoid(intercept + dot(coef, row)),
            Fitted::Gbm(g) => g.predict_row(row),
            Fitted::Knn(k) => k.predict_row(row),
            Fitted::Super(s) => s.predict_row(row),
        }
    }

    pub fn predict(&self, v: &DMatrix<f64>) -> Vec<f64> {
        match &self.fitted {
            Fitted::Knn(k) => k.predict(v),
            Fitted::Super(s) => s.predict(v),
            _ => rows(v).map(|r| self.predict_row(&r)).collect(),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn rows(v: &DMatrix<f64>) -> impl Iterator<Item = Vec<f64>> + '_ {
    v.row_iter().map(|r| r.iter().copied().collect())
}

fn check_shapes(v: &DMatrix<f64>, t: &[f64]) -> Result<()> {
    if v.nrows() != t.len() {
        return Err(Error::InvalidParams(format!(
            "{} covariate rows vs {} treatment values",
            v.nrows(),
            t.len()
        )));
    }
    Ok(())
}

pub(crate) fn floor_sd(sd: f64, t: &[f64]) -> f64 {
    sd.max(RESIDUAL_SD_FLOOR * sample_sd(t)).max(f64::MIN_POSITIVE.sqrt())
}

fn column_means(v: &DMatrix<f64>) -> Vec<f64> {
    (0..v.ncols()).map(|j| v.column(j).mean()).collect()
}

/// Least-squares slopes on centred data; falls back to a tiny ridge when the
/// covariate Gram matrix is rank deficient.
fn centred_least_squares(v: &DMatrix<f64>, t: &[f64]) -> (f64, Vec<f64>) {
    let m = v.ncols();
    let t_mean = mean(t);
    if m == 0 {
        return (t_mean, Vec::new());
    }
    let means = column_means(v);
    let mut vc = v.clone();
    for j in 0..m {
        vc.column_mut(j).add_scalar_mut(-means[j]);
    }
    let tc = DVector::from_iterator(t.len(), t.iter().map(|x| x - t_mean));
    let mut gram = vc.transpose() * &vc;
    let rhs = vc.transpose() * tc;
    let sv = gram.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 1e-12 * smax) {
        let lambda = 1e-8 * gram.trace() / m as f64;
        let lambda = if lambda > 0.0 { lambda } else { 1e-12 };
        for j in 0..m {
            gram[(j, j)] += lambda;
        }
    }
    let coef = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram.pseudo_inverse(0.0).map(|p| p * rhs).unwrap_or_else(|_| DVector::zeros(m)),
    };
    let coef: Vec<f64> = coef.iter().copied().collect();
    let intercept = t_mean - dot(&coef, &means);
    (intercept, coef)
}

pub fn fit_ols(v: &DMatrix<f64>, t: &[f64]) -> Result<TreatmentModel> {
    check_shapes(v, t)?;
    let (n, m) = v.shape();
    if n <= m + 1 {
        return Err(Error::Precondition(format!("OLS needs n > m + 1 (n = {n}, m = {m})")));
    }
    let (intercept, coef) = centred_least_squares(v, t);
    let rss: f64 = rows(v)
        .zip(t)
        .map(|(r, ti)| {
            let e = ti - intercept - dot(&coef, &r);
            e * e
        })
        .sum();
    let sd = (rss / (n - m - 1) as f64).sqrt();
    Ok(TreatmentModel {
        fitted: Fitted::Linear { intercept, coef },
        residual_sd: Some(floor_sd(sd, t)),
    })
}

fn logistic_objective(v: &DMatrix<f64>, t: &[f64], beta: &DVector<f64>) -> f64 {
    let n = t.len() as f64;
    let mut nll = 0.0;
    for (i, ti) in t.iter().enumerate() {
        let mut z = beta[0];
        for j in 0..v.ncols() {
            z += beta[j + 1] * v[(i, j)];
        }
        // log(1 + e^z) - t z, computed stably
        let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
        nll += softplus - ti * z;
    }
    let pen: f64 = beta.iter().skip(1).map(|b| b * b).sum();
    nll / n + 0.5 * LOGISTIC_L2 * pen
}

/// Penalized logistic regression by damped Newton iterations. The intercept is unpenalized.
pub fn fit_logistic(v: &DMatrix<f64>, t: &[f64]) -> Result<TreatmentModel> {
    check_shapes(v, t)?;
    if t.iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(Error::InvalidParams("logistic treatment must be 0/1".into()));
    }
    let ones = t.iter().filter(|&&x| x == 1.0).count();
    if ones == 0 || ones == t.len() {
        return Err(Error::DegenerateTreatment("only one treatment level present".into()));
    }
    let (n, m) = v.shape();
    let p = m + 1;
    let mut design = DMatrix::from_element(n, p, 1.0);
    design.view_mut((0, 1), (n, m)).copy_from(v);

    let pbar = ones as f64 / n as f64;
    let mut beta = DVector::zeros(p);
    beta[0] = (pbar / (1.0 - pbar)).ln();
    let mut obj = logistic_objective(v, t, &beta);
    for _ in 0..200 {
        let z = &design * &beta;
        let prob: Vec<f64> = z.iter().map(|&zi| sigmoid(zi)).collect();
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        for i in 0..n {
            let r = prob[i] - t[i];
            let w = prob[i] * (1.0 - prob[i]);
            let xi = design.row(i);
            for a in 0..p {
                grad[a] += r * xi[a];
                for b in a..p {
                    hess[(a, b)] += w * xi[a] * xi[b];
                }
            }
        }
        grad /= n as f64;
        hess /= n as f64;
        for a in 0..p {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        for j in 1..p {
            grad[j] += LOGISTIC_L2 * beta[j];
            hess[(j, j)] += LOGISTIC_L2;
        }
        hess[(0, 0)] += 1e-14;
        if grad.amax() < 1e-11 {
            break;
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => grad.clone(),
        };
        let mut s = 1.0;
        let mut improved = false;
        for _ in 0..60 {
            let cand = &beta - s * &step;
            let cobj = logistic_objective(v, t, &cand);
            if cobj <= obj {
                beta = cand;
                improved = obj - cobj > 0.0;
                obj = cobj;
                break;
            }
            s *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(TreatmentModel {
        fitted: Fitted::Logistic { intercept: beta[0], coef: beta.iter().skip(1).copied().collect() },
        residual_sd: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbmParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
}

impl Default for GbmParams {
    fn default() -> Self {
        Self { n_trees: 100, max_depth: 2, learning_rate: 0.1, min_samples_leaf: 5 }
    }
}

impl GbmParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees < 1 || self.max_depth < 1 || self.min_samples_leaf < 1 {
            return Err(Error::InvalidParams(
                "n_trees, max_depth and min_samples_leaf must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::InvalidParams("learning_rate must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(f64),
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut k = 0;
        loop {
            match self.nodes[k] {
                Node::Leaf(v) => return v,
                Node::Split { feature, threshold, left, right } => {
                    k = if row[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn is_stump_leaf(&self) -> bool {
        matches!(self.nodes.as_slice(), [Node::Leaf(_)])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbmModel {
    pub init: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
    /// Training MSE after each boosting stage; entry 0 is the init-only fit.
    pub train_mse: Vec<f64>,
}

impl GbmModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.init + self.learning_rate * self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>()
    }
}

struct TreeBuilder<'a> {
    v: &'a DMatrix<f64>,
    order: &'a [Vec<usize>],
    resid: &'a [f64],
    max_depth: usize,
    min_leaf: usize,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    fn build(&mut self, members: &[bool], count: usize, depth: usize) -> usize {
        let idx = self.nodes.len();
        let (sum, _) = self.sums(members);
        self.nodes.push(Node::Leaf(sum / count as f64));
        if depth >= self.max_depth || count < 2 * self.min_leaf {
            return idx;
        }
        let Some((feature, threshold)) = self.best_split(members, count, sum) else {
            return idx;
        };
        let mut left_m = vec![false; members.len()];
        let mut right_m = vec![false; members.len()];
        let (mut nl, mut nr) = (0, 0);
        for i in 0..members.len() {
            if members[i] {
                if self.v[(i, feature)] <= threshold {
                    left_m[i] = true;
                    nl += 1;
                } else {
                    right_m[i] = true;
                    nr += 1;
                }
            }
        }
        let left = self.build(&left_m, nl, depth + 1);
        let right = self.build(&right_m, nr, depth + 1);
        self.nodes[idx] = Node::Split { feature, threshold, left, right };
        idx
    }

    fn sums(&self, members: &[bool]) -> (f64, usize) {
        members
            .iter()
            .zip(self.resid)
            .filter(|(m, _)| **m)
            .fold((0.0, 0), |(s, c), (_, r)| (s + r, c + 1))
    }

    fn best_split(&self, members: &[bool], count: usize, total: f64) -> Option<(usize, f64)> {
        let base = total * total / count as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        for (j, ord) in self.order.iter().enumerate() {
            let mut left_sum = 0.0;
            let mut nl = 0;
            let mut prev: Option<usize> = None;
            for &i in ord.iter().filter(|&&i| members[i]) {
                if let Some(p) = prev {
                    let (a, b) = (self.v[(p, j)], self.v[(i, j)]);
                    let nr = count - nl;
                    if a < b && nl >= self.min_leaf && nr >= self.min_leaf {
                        let right_sum = total - left_sum;
                        let score = left_sum * left_sum / nl as f64 + right_sum * right_sum / nr as f64;
                        let gain = score - base;
                        if gain > 1e-12 * (1.0 + base.abs()) && best.is_none_or(|(g, _, _)| gain > g) {
                            best = Some((gain, j, a + 0.5 * (b - a)));
                        }
                    }
                }
                left_sum += self.resid[i];
                nl += 1;
                prev = Some(i);
            }
        }
        best.map(|(_, j, thr)| (j, thr))
    }
}

fn presort(v: &DMatrix<f64>) -> Vec<Vec<usize>> {
    (0..v.ncols())
        .map(|j| {
            let mut idx: Vec<usize> = (0..v.nrows()).collect();
            idx.sort_by(|&a, &b| v[(a, j)].total_cmp(&v[(b, j)]).then(a.cmp(&b)));
            idx
        })
        .collect()
}

/// Boosted regression trees on squared error. Also returns the in-sample
/// predictions after each stage listed in `checkpoints`.
pub fn fit_gbm_path(
    v: &DMatrix<f64>,
    t: &[f64],
    params: &GbmParams,
    checkpoints: &[usize],
) -> Result<(GbmModel, Vec<Vec<f64>>)> {
    check_shapes(v, t)?;
    params.validate()?;
    let n = t.len();
    if n < 2 * params.min_samples_leaf {
        return Err(Error::Precondition(format!(
            "GBM needs n >= 2 * min_samples_leaf (n = {n}, min_samples_leaf = {})",
            params.min_samples_leaf
        )));
    }
    let order = presort(v);
    let init = mean(t);
    let mut pred = vec![init; n];
    let mse = |p: &[f64]| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64;
    let mut train_mse = vec![mse(&pred)];
    let mut trees = Vec::with_capacity(params.n_trees);
    let mut snapshots = Vec::new();
    if checkpoints.contains(&0) {
        snapshots.push(pred.clone());
    }
    let all = vec![true; n];
    for stage in 1..=params.n_trees {
        let resid: Vec<f64> = t.iter().zip(&pred).map(|(a, b)| a - b).collect();
        let mut builder = TreeBuilder {
            v,
            order: &order,
            resid: &resid,
            max_depth: params.max_depth,
            min_leaf: params.min_samples_leaf,
            nodes: Vec::new(),
        };
        builder.build(&all, n, 0);
        let tree = Tree { nodes: builder.nodes };
        for (i, p) in pred.iter_mut().enumerate() {
            let row: Vec<f64> = v.row(i).iter().copied().collect();
            *p += params.learning_rate * tree.predict_row(&row);
        }
        trees.push(tree);
        train_mse.push(mse(&pred));
        if checkpoints.contains(&stage) {
            snapshots.push(pred.clone());
        }
    }
    Ok((GbmModel { init, learning_rate: params.learning_rate, trees, train_mse }, snapshots))
}

fn gbm_model(g: GbmModel, v: &DMatrix<f64>, t: &[f64]) -> TreatmentModel {
    let n = t.len();
    let rss: f64 = rows(v).zip(t).map(|(r, ti)| (ti - g.predict_row(&r)).powi(2)).sum();
    let sd = (rss / n as f64).sqrt();
    TreatmentModel { fitted: Fitted::Gbm(g), residual_sd: Some(floor_sd(sd, t)) }
}

pub fn fit_gbm(v: &DMatrix<f64>, t: &[f64], params: &GbmParams) -> Result<TreatmentModel> {
    let (g, _) = fit_gbm_path(v, t, params, &[])?;
    Ok(gbm_model(g, v, t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    k: usize,
    centre: Vec<f64>,
    scale: Vec<f64>,
    train: DMatrix<f64>,
    target: Vec<f64>,
}

impl KnnModel {
    fn standardize_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.centre)
            .zip(&self.scale)
            .map(|((x, c), s)| (x - c) / s)
            .collect()
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let q = self.standardize_row(row);
        let n = self.train.nrows();
        let mut d: Vec<(f64, usize)> = (0..n)
            .map(|i| {
                let dist: f64 = (0..q.len()).map(|j| (self.train[(i, j)] - q[j]).powi(2)).sum();
                (dist, i)
            })
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < n {
            d.select_nth_unstable_by(self.k - 1, cmp);
        }
        d[..self.k].iter().map(|&(_, i)| self.target[i]).sum::<f64>() / self.k as f64
    }

    pub fn predict(&self, v: &DMatrix<f64>) -> Vec<f64> {
        rows(v).map(|r| self.predict_row(&r)).collect()
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// k-nearest-neighbour regression in internally standardized covariate space.
pub fn fit_knn(v: &DMatrix<f64>, t: &[f64], k: usize) -> Result<TreatmentModel> {
    check_shapes(v, t)?;
    let (n, m) = v.shape();
    if k < 1 || k > n {
        return Err(Error::InvalidParams(format!("k = {k} outside 1..={n}")));
    }
    let centre = column_means(v);
    let scale: Vec<f64> = (0..m)
        .map(|j| {
            let c = centre[j];
            let sd = (v.column(j).iter().map(|x| (x - c).powi(2)).sum::<f64>() / n as f64).sqrt();
            if sd > 0.0 { sd } else { 1.0 }
        })
        .collect();
    let train = DMatrix::from_fn(n, m, |i, j| (v[(i, j)] - centre[j]) / scale[j]);
    let model = KnnModel { k, centre, scale, train, target: t.to_vec() };
    let rss: f64 = rows(v).zip(t).map(|(r, ti)| (ti - model.predict_row(&r)).powi(2)).sum();
    let sd = (rss / n as f64).sqrt();
    Ok(TreatmentModel { fitted: Fitted::Knn(model), residual_sd: Some(floor_sd(sd, t)) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperLearner {
    pub candidates: Vec<TreatmentModel>,
    /// Convex combination weights, one per candidate.
    pub weights: Vec<f64>,
    /// Cross-validated MSE of each candidate.
    pub cv_risks: Vec<f64>,
    /// Cross-validated MSE of the combination.
    pub combined_risk: f64,
}

impl SuperLearner {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.candidates
            .iter()
            .zip(&self.weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|(c, w)| w * c.predict_row(row))
            .sum()
    }

    pub fn predict(&self, v: &DMatrix<f64>) -> Vec<f64> {
        let mut out = vec![0.0; v.nrows()];
        for (c, w) in self.candidates.iter().zip(&self.weights) {
            if *w > 0.0 {
                for (o, p) in out.iter_mut().zip(c.predict(v)) {
                    *o += w * p;
                }
            }
        }
        out
    }
}

/// Least squares over the probability simplex by enumerating every support
/// set. Exact for the handful of candidates a super learner combines.
/// Returns `(weights, mean squared error)`.
pub fn simplex_least_squares(preds: &DMatrix<f64>, t: &[f64]) -> (Vec<f64>, f64) {
    let (n, k) = preds.shape();
    let risk = |a: &[f64]| {
        (0..n)
            .map(|i| {
                let fit: f64 = (0..k).map(|c| a[c] * preds[(i, c)]).sum();
                (t[i] - fit).powi(2)
            })
            .sum::<f64>()
            / n as f64
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    for mask in 1u32..(1 << k) {
        let support: Vec<usize> = (0..k).filter(|c| mask & (1 << c) != 0).collect();
        let s = support.len();
        let alpha_s = if s == 1 {
            Some(vec![1.0])
        } else {
            let mut kkt = DMatrix::zeros(s + 1, s + 1);
            let mut rhs = DVector::zeros(s + 1);
            for (a, &ca) in support.iter().enumerate() {
                for (b, &cb) in support.iter().enumerate() {
                    kkt[(a, b)] = 2.0 * preds.column(ca).dot(&preds.column(cb));
                }
                kkt[(a, s)] = 1.0;
                kkt[(s, a)] = 1.0;
                rhs[a] = 2.0 * preds.column(ca).iter().zip(t).map(|(p, y)| p * y).sum::<f64>();
            }
            rhs[s] = 1.0;
            kkt.lu().solve(&rhs).and_then(|sol| {
                let a: Vec<f64> = sol.iter().take(s).copied().collect();
                (a.iter().all(|x| x.is_finite() && *x >= -1e-12)).then_some(a)
            })
        };
        let Some(alpha_s) = alpha_s else { continue };
        let mut alpha = vec![0.0; k];
        for (&c, &a) in support.iter().zip(&alpha_s) {
            alpha[c] = a.max(0.0);
        }
        let total: f64 = alpha.iter().sum();
        alpha.iter_mut().for_each(|a| *a /= total);
        let r = risk(&alpha);
        if best.as_ref().is_none_or(|(_, br)| r < *br) {
            best = Some((alpha, r));
        }
    }
    best.expect("vertices are always feasible")
}

/// Strided fold assignment: sample `i` belongs to fold `i % folds`.
pub fn fold_of(i: usize, folds: usize) -> usize {
    i % folds
}

const KNN_K: usize = 10;

fn fit_candidates(v: &DMatrix<f64>, t: &[f64]) -> Result<Vec<TreatmentModel>> {
    let n = t.len();
    let gbm = GbmParams { min_samples_leaf: GbmParams::default().min_samples_leaf.min(n / 2).max(1), ..Default::default() };
    Ok(vec![fit_ols(v, t)?, fit_gbm(v, t, &gbm)?, fit_knn(v, t, KNN_K.min(n))?])
}

/// Cross-validated convex stacking of {OLS, GBM, kNN}.
pub fn fit_superlearner(v: &DMatrix<f64>, t: &[f64], folds: usize) -> Result<TreatmentModel> {
    check_shapes(v, t)?;
    let n = t.len();
    if folds < 2 || n < 2 * folds {
        return Err(Error::Precondition(format!("super learner needs folds >= 2 and n >= 2 * folds (n = {n}, folds = {folds})")));
    }
    let mut oof = DMatrix::zeros(n, 3);
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of(i, folds) != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold_of(i, folds) == f).collect();
        let vt = v.select_rows(&train);
        let tt: Vec<f64> = train.iter().map(|&i| t[i]).collect();
        let vs = v.select_rows(&test);
        for (c, model) in fit_candidates(&vt, &tt)?.iter().enumerate() {
            for (&i, p) in test.iter().zip(model.predict(&vs)) {
                oof[(i, c)] = p;
            }
        }
    }
    let cv_risks: Vec<f64> = (0..3)
        .map(|c| oof.column(c).iter().zip(t).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / n as f64)
        .collect();
    let (weights, combined_risk) = simplex_least_squares(&oof, t);
    let candidates = fit_candidates(v, t)?;
    let sd = floor_sd(combined_risk.sqrt(), t);
    Ok(TreatmentModel {
        fitted: Fitted::Super(SuperLearner { candidates, weights, cv_risks, combined_risk }),
        residual_sd: Some(sd),
    })
}

/// Generalized propensity score: Gaussian density of `t` around the model's prediction.
pub fn conditional_density(model: &TreatmentModel, row: &[f64], t: f64) -> Result<f64> {
    match model.residual_sd {
        Some(sd) => Ok(normal_pdf(t, model.predict_row(row), sd)),
        None => Err(Error::WrongKind(format!("{:?}", model.kind()).to_lowercase())),
    }
}
