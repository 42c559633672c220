use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::WeightVector;
use crate::error::{Error, Result};
use crate::stats::{column, midranks, weighted_pearson};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateBalance {
    pub index: usize,
    pub pearson: f64,
    pub pearson_weighted: f64,
    pub spearman: f64,
    pub spearman_weighted: f64,
    /// A weighted variance vanished; the weighted correlations are reported as 0.
    pub degenerate: bool,
}

/// Treatment/covariate dependence before and after weighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub covariates: Vec<CovariateBalance>,
    pub max_abs_corr: f64,
    pub max_abs_corr_unweighted: f64,
    pub mean_abs_spearman: f64,
    pub mean_abs_spearman_unweighted: f64,
}

pub fn balance_diagnostics(t: &[f64], v: &DMatrix<f64>, w: &WeightVector) -> Result<BalanceReport> {
    balance_from_slice(t, v, &w.weights)
}

pub(crate) fn balance_from_slice(t: &[f64], v: &DMatrix<f64>, w: &[f64]) -> Result<BalanceReport> {
    let n = t.len();
    if v.nrows() != n || w.len() != n {
        return Err(Error::InvalidParams(format!(
            "length mismatch: T {n}, V {}, w {}",
            v.nrows(),
            w.len()
        )));
    }
    let ones = vec![1.0; n];
    let t_ranks = midranks(t);
    let mut covariates = Vec::with_capacity(v.ncols());
    for j in 0..v.ncols() {
        let x = column(v, j);
        let x_ranks = midranks(&x);
        let pw = weighted_pearson(t, &x, w);
        let sw = weighted_pearson(&t_ranks, &x_ranks, w);
        covariates.push(CovariateBalance {
            index: j,
            pearson: weighted_pearson(t, &x, &ones).unwrap_or(0.0),
            pearson_weighted: pw.unwrap_or(0.0),
            spearman: weighted_pearson(&t_ranks, &x_ranks, &ones).unwrap_or(0.0),
            spearman_weighted: sw.unwrap_or(0.0),
            degenerate: pw.is_none() || sw.is_none(),
        });
    }
    let max_abs = |f: fn(&CovariateBalance) -> f64| covariates.iter().map(|c| f(c).abs()).fold(0.0, f64::max);
    let mean_abs = |f: fn(&CovariateBalance) -> f64| {
        if covariates.is_empty() {
            0.0
        } else {
            covariates.iter().map(|c| f(c).abs()).sum::<f64>() / covariates.len() as f64
        }
    };
    Ok(BalanceReport {
        max_abs_corr: max_abs(|c| c.pearson_weighted),
        max_abs_corr_unweighted: max_abs(|c| c.pearson),
        mean_abs_spearman: mean_abs(|c| c.spearman_weighted),
        mean_abs_spearman_unweighted: mean_abs(|c| c.spearman),
        covariates,
    })
}

/// Mean absolute weighted Spearman correlation between `t` and each covariate.
pub(crate) fn mean_abs_spearman(t_ranks: &[f64], v_ranks: &[Vec<f64>], w: &[f64]) -> f64 {
    if v_ranks.is_empty() {
        return 0.0;
    }
    v_ranks
        .iter()
        .map(|r| weighted_pearson(t_ranks, r, w).unwrap_or(0.0).abs())
        .sum::<f64>()
        / v_ranks.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::normalize_weights;

    #[test]
    fn uniform_weights_equal_unweighted() {
        let t = [1.0, 2.0, 4.0, 3.0, 7.0];
        let v = DMatrix::from_column_slice(5, 2, &[2.0, 1.0, 5.0, 3.0, 6.0, 0.0, 1.0, 0.0, 2.0, 1.0]);
        let w = normalize_weights(&[1.0; 5]).unwrap();
        let r = balance_diagnostics(&t, &v, &w).unwrap();
        for c in &r.covariates {
            assert_eq!(c.pearson, c.pearson_weighted);
            assert_eq!(c.spearman, c.spearman_weighted);
            assert!(!c.degenerate);
        }
        assert_eq!(r.max_abs_corr, r.max_abs_corr_unweighted);
    }

    #[test]
    fn two_point_mass() {
        let t = [1.0, 2.0, 3.0, 4.0];
        let v = DMatrix::from_column_slice(4, 1, &[5.0, 1.0, 2.0, 0.0]);
        let w = normalize_weights(&[1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = balance_diagnostics(&t, &v, &w).unwrap();
        assert!((r.covariates[0].pearson_weighted + 1.0).abs() < 1e-12);
        let w = normalize_weights(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let r = balance_diagnostics(&t, &v, &w).unwrap();
        assert!(r.covariates[0].degenerate);
        assert_eq!(r.covariates[0].pearson_weighted, 0.0);
    }

    #[test]
    fn hand_weighted_pearson() {
        // w = (1,2,3,4)/10, t = (0,1,2,3), x = (1,0,2,4)
        // E t = 2, E x = 2.3, E tx = 6, cov = 1.4, var t = 1, var x = 7.7 - 5.29 = 2.41
        let t = [0.0, 1.0, 2.0, 3.0];
        let v = DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 2.0, 4.0]);
        let w = normalize_weights(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = balance_diagnostics(&t, &v, &w).unwrap();
        let expected = 1.4 / 2.41f64.sqrt();
        assert!((r.covariates[0].pearson_weighted - expected).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch() {
        let w = normalize_weights(&[1.0; 3]).unwrap();
        assert!(balance_diagnostics(&[1.0, 2.0], &DMatrix::zeros(2, 1), &w).is_err());
    }
}
