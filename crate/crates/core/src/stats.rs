//! Small numeric helpers shared across estimators.

use nalgebra::DMatrix;
use statrs::function::erf::erfc;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Two-sided 95% normal critical value used for reported intervals.
pub const Z_95: f64 = 1.96;

pub fn normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    INV_SQRT_2PI / sd * (-0.5 * z * z).exp()
}

/// Two-sided p-value of a standard normal test statistic.
pub fn two_sided_p(z: f64) -> f64 {
    if z.is_nan() {
        return 1.0;
    }
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation with the `n - 1` denominator.
pub fn sample_sd(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    let ss: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (x.len() - 1) as f64).sqrt()
}

pub fn weighted_mean(x: &[f64], w: &[f64]) -> f64 {
    let sw: f64 = w.iter().sum();
    x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw
}

/// Weighted Pearson correlation. Returns `None` when either weighted variance vanishes.
pub fn weighted_pearson(x: &[f64], y: &[f64], w: &[f64]) -> Option<f64> {
    let sw: f64 = w.iter().sum();
    if !(sw > 0.0) {
        return None;
    }
    let mx = weighted_mean(x, w);
    let my = weighted_mean(y, w);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for ((a, b), wi) in x.iter().zip(y).zip(w) {
        let dx = a - mx;
        let dy = b - my;
        sxy += wi * dx * dy;
        sxx += wi * dx * dx;
        syy += wi * dy * dy;
    }
    let scale = sx_scale(sxx, syy, sw);
    if sxx <= scale || syy <= scale {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

// Relative cutoff below which a weighted sum of squares counts as zero.
fn sx_scale(sxx: f64, syy: f64, sw: f64) -> f64 {
    1e-24 * sw * (1.0 + sxx.abs().max(syy.abs()))
}

/// Midranks (1-based), ties receive the average of their positions.
pub fn midranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Percentile with linear interpolation between order statistics,
/// `h = (n - 1) * p / 100`.
pub fn percentile_linear(x: &[f64], p: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let h = (s.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

/// Column-wise standardization with population moments. Columns with zero
/// spread are dropped; the kept column indices are returned alongside.
pub fn standardize_columns(v: &DMatrix<f64>) -> (DMatrix<f64>, Vec<usize>) {
    let n = v.nrows();
    let mut kept = Vec::new();
    let mut cols = Vec::new();
    for j in 0..v.ncols() {
        let col: Vec<f64> = v.column(j).iter().copied().collect();
        let m = mean(&col);
        let sd = (col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64).sqrt();
        if sd > 1e-12 * (1.0 + m.abs()) {
            kept.push(j);
            cols.extend(col.iter().map(|x| (x - m) / sd));
        }
    }
    (DMatrix::from_vec(n, kept.len(), cols), kept)
}

/// Standardize a vector with population moments. Returns `None` for constant input.
pub fn standardize(x: &[f64]) -> Option<Vec<f64>> {
    let m = mean(x);
    let sd = (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt();
    if sd > 1e-12 * (1.0 + m.abs()) {
        Some(x.iter().map(|v| (v - m) / sd).collect())
    } else {
        None
    }
}

pub fn column(v: &DMatrix<f64>, j: usize) -> Vec<f64> {
    v.column(j).iter().copied().collect()
}
