use crate::data::{normalize_weights, WeightVector};
use crate::error::{Error, Result};
use crate::stats::percentile_linear;

/// Clips weights above the given percentile to that percentile's value and
/// renormalizes. Estimator tag and warnings carry over.
pub fn weight_trim(w: &WeightVector, percentile: f64) -> Result<WeightVector> {
    if !(percentile > 50.0 && percentile <= 100.0) {
        return Err(Error::InvalidParams(format!("trim percentile must be in (50, 100], got {percentile}")));
    }
    if percentile == 100.0 {
        return Ok(w.clone());
    }
    let cap = percentile_linear(&w.weights, percentile);
    let clipped: Vec<f64> = w.weights.iter().map(|&x| x.min(cap)).collect();
    let mut out = normalize_weights(&clipped)?;
    out.estimator = w.estimator;
    out.warnings = w.warnings.clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_at_100() {
        let w = normalize_weights(&[1.0, 2.0, 3.0, 10.0]).unwrap();
        assert_eq!(weight_trim(&w, 100.0).unwrap(), w);
    }

    #[test]
    fn hand_example() {
        // sorted [1,1,1,9], h = 3 * 0.75 = 2.25 -> 1 + 0.25 * 8 = 3
        // clipped [1,1,1,3], sum 6 -> scaled by 4/6
        let w = normalize_weights(&[1.0, 1.0, 1.0, 9.0]).unwrap();
        let t = weight_trim(&w, 75.0).unwrap();
        let expected = [2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 2.0];
        for (a, b) in t.weights.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{:?}", t.weights);
        }
    }

    #[test]
    fn uniform_unchanged() {
        let w = normalize_weights(&[1.0; 7]).unwrap();
        assert_eq!(weight_trim(&w, 90.0).unwrap().weights, w.weights);
    }

    #[test]
    fn rejects_bad_percentile() {
        let w = normalize_weights(&[1.0; 3]).unwrap();
        assert!(weight_trim(&w, 50.0).is_err());
        assert!(weight_trim(&w, 100.5).is_err());
    }

    proptest! {
        #[test]
        fn trimming_never_lowers_ess(
            raw in prop::collection::vec(0.01f64..100.0, 2..60),
            p in 50.5f64..100.0,
        ) {
            let w = normalize_weights(&raw).unwrap();
            let t = weight_trim(&w, p).unwrap();
            prop_assert!(t.ess >= w.ess - 1e-9);
            let mean = t.weights.iter().sum::<f64>() / t.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-9);
        }
    }
}
