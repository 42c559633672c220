//! Data generators: the 12-feature two-class benchmark and structural causal
//! models with a known average causal effect.
//!
//! All draws come from a `ChaCha8Rng` seeded with `seed` and
//! `rand_distr::StandardNormal` (ziggurat), see [`crate::rng`].

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blackbox::sigmoid;
use crate::data::{Dataset, FeatureSpec};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

pub const SYNTH_FEATURES: usize = 12;

/// How the second parameter of `N(mean, s)` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SpreadParam {
    #[default]
    Sd,
    Variance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub sd: f64,
    pub signal_mean: f64,
    pub spread: SpreadParam,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n: 1000, seed: 0, sd: 0.2, signal_mean: 1.0, spread: SpreadParam::Sd }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<f64> {
        if self.n < 1 {
            return Err(Error::InvalidParams("n must be at least 1".into()));
        }
        if !(self.sd > 0.0) || !self.sd.is_finite() || !self.signal_mean.is_finite() {
            return Err(Error::InvalidParams("sd must be positive and finite".into()));
        }
        Ok(match self.spread {
            SpreadParam::Sd => self.sd,
            SpreadParam::Variance => self.sd.sqrt(),
        })
    }
}

pub fn synth_feature_names() -> Vec<String> {
    (1..=SYNTH_FEATURES).map(|j| format!("f{j}")).collect()
}

/// Draws the two-class benchmark: `f4..f12` are pure noise, `f1..f3` are
/// centred at `+signal_mean` (label 1) or `-signal_mean` (label 0) with equal
/// probability.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let sd = cfg.validate()?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut x = DMatrix::zeros(cfg.n, SYNTH_FEATURES);
    let mut labels = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let positive = rng.random_bool(0.5);
        let centre = if positive { cfg.signal_mean } else { -cfg.signal_mean };
        for j in 0..SYNTH_FEATURES {
            let z: f64 = StandardNormal.sample(&mut rng);
            x[(i, j)] = if j < 3 { centre + sd * z } else { sd * z };
        }
        labels.push(if positive { 1.0 } else { 0.0 });
    }
    Ok((x, labels))
}

/// `X ~ N(0,1)`, `T = gamma X + e_T`, `Y = beta T + delta X + e_Y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearScmConfig {
    pub seed: u64,
    pub n: usize,
    pub gamma: f64,
    pub beta: f64,
    pub delta: f64,
    pub noise_t: f64,
    pub noise_y: f64,
}

impl Default for LinearScmConfig {
    fn default() -> Self {
        Self { seed: 0, n: 2000, gamma: 0.8, beta: 2.0, delta: 1.0, noise_t: 1.0, noise_y: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmTruth {
    pub treatment: String,
    pub ace: f64,
    pub gamma: f64,
    pub delta: f64,
    pub noise_t: f64,
    pub noise_y: f64,
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ScmSample {
    pub dataset: Dataset,
    pub truth: ScmTruth,
}

fn check_noise(noise: &[f64]) -> Result<()> {
    if noise.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidParams("noise sds must be positive".into()));
    }
    Ok(())
}

pub fn gen_linear_scm(cfg: &LinearScmConfig) -> Result<ScmSample> {
    check_noise(&[cfg.noise_t, cfg.noise_y])?;
    if cfg.n < 2 {
        return Err(Error::InvalidParams("n must be at least 2".into()));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let mut x = DMatrix::zeros(cfg.n, 2);
    let mut y = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let xi: f64 = StandardNormal.sample(&mut rng);
        let et: f64 = StandardNormal.sample(&mut rng);
        let ey: f64 = StandardNormal.sample(&mut rng);
        let ti = cfg.gamma * xi + cfg.noise_t * et;
        x[(i, 0)] = ti;
        x[(i, 1)] = xi;
        y.push(cfg.beta * ti + cfg.delta * xi + cfg.noise_y * ey);
    }
    let dataset = Dataset::new(x, vec![FeatureSpec::continuous("T"), FeatureSpec::continuous("X")], y)?;
    Ok(ScmSample {
        dataset,
        truth: ScmTruth {
            treatment: "T".into(),
            ace: cfg.beta,
            gamma: cfg.gamma,
            delta: cfg.delta,
            noise_t: cfg.noise_t,
            noise_y: cfg.noise_y,
            n: cfg.n,
            seed: cfg.seed,
        },
    })
}

/// `X ~ N(0,1)`, `T ~ Bernoulli(sigmoid(gamma X))`, `Y = effect T + delta X + e_Y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryScmConfig {
    pub seed: u64,
    pub n: usize,
    pub gamma: f64,
    pub effect: f64,
    pub delta: f64,
    pub noise_y: f64,
}

impl Default for BinaryScmConfig {
    fn default() -> Self {
        Self { seed: 0, n: 5000, gamma: 1.0, effect: -1.5, delta: 1.0, noise_y: 1.0 }
    }
}

pub fn gen_binary_scm(cfg: &BinaryScmConfig) -> Result<ScmSample> {
    check_noise(&[cfg.noise_y])?;
    if cfg.n < 2 {
        return Err(Error::InvalidParams("n must be at least 2".into()));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let mut x = DMatrix::zeros(cfg.n, 2);
    let mut y = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let xi: f64 = StandardNormal.sample(&mut rng);
        let ti = if rng.random_bool(sigmoid(cfg.gamma * xi)) { 1.0 } else { 0.0 };
        let ey: f64 = StandardNormal.sample(&mut rng);
        x[(i, 0)] = ti;
        x[(i, 1)] = xi;
        y.push(cfg.effect * ti + cfg.delta * xi + cfg.noise_y * ey);
    }
    let dataset = Dataset::new(x, vec![FeatureSpec::binary("T"), FeatureSpec::continuous("X")], y)?;
    Ok(ScmSample {
        dataset,
        truth: ScmTruth {
            treatment: "T".into(),
            ace: cfg.effect,
            gamma: cfg.gamma,
            delta: cfg.delta,
            noise_t: 0.0,
            noise_y: cfg.noise_y,
            n: cfg.n,
            seed: cfg.seed,
        },
    })
}

/// `m` independent standard normal features and an independent standard normal outcome.
pub fn gen_independent(n: usize, m: usize, seed: u64) -> Result<Dataset> {
    let mut rng = rng_from_seed(seed);
    let x = DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(&mut rng));
    let y = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let specs = (1..=m).map(|j| FeatureSpec::continuous(format!("f{j}"))).collect();
    Dataset::new(x, specs, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::mean;

    fn col_where(x: &DMatrix<f64>, j: usize, labels: &[f64], want: Option<f64>) -> Vec<f64> {
        (0..x.nrows())
            .filter(|&i| want.is_none_or(|w| labels[i] == w))
            .map(|i| x[(i, j)])
            .collect()
    }

    #[test]
    fn class_conditional_means() {
        let cfg = SynthConfig { n: 1000, seed: 11, ..Default::default() };
        let (x, labels) = gen_synthetic(&cfg).unwrap();
        let f1 = col_where(&x, 0, &labels, Some(1.0));
        let m = mean(&f1);
        assert!((0.97..=1.03).contains(&m), "{m}");
        let n1 = f1.len() as f64;
        for j in 0..3 {
            let c = col_where(&x, j, &labels, Some(1.0));
            assert!((mean(&c) - 1.0).abs() < 5.0 * 0.2 / n1.sqrt());
        }
        for j in 3..12 {
            let c = col_where(&x, j, &labels, None);
            assert!(mean(&c).abs() < 5.0 * 0.2 / (1000f64).sqrt());
        }
    }

    #[test]
    fn single_sample_shape() {
        let (x, l) = gen_synthetic(&SynthConfig { n: 1, ..Default::default() }).unwrap();
        assert_eq!(x.shape(), (1, 12));
        assert_eq!(l.len(), 1);
        assert!(gen_synthetic(&SynthConfig { n: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn label_balance() {
        let (_, l) = gen_synthetic(&SynthConfig { n: 10_000, seed: 3, ..Default::default() }).unwrap();
        let frac = mean(&l);
        assert!((0.485..=0.515).contains(&frac), "{frac}");
    }

    #[test]
    fn variance_reading_widens_spread() {
        let cfg = SynthConfig { n: 4000, seed: 5, spread: SpreadParam::Variance, ..Default::default() };
        let (x, _) = gen_synthetic(&cfg).unwrap();
        let c = col_where(&x, 5, &[], None);
        let sd = crate::stats::sample_sd(&c);
        assert!((sd - 0.2f64.sqrt()).abs() < 0.02, "{sd}");
    }

    #[test]
    fn seed_determinism() {
        let cfg = SynthConfig { n: 50, seed: 9, ..Default::default() };
        assert_eq!(gen_synthetic(&cfg).unwrap(), gen_synthetic(&cfg).unwrap());
        let s = LinearScmConfig { n: 50, seed: 9, ..Default::default() };
        assert_eq!(gen_linear_scm(&s).unwrap().dataset, gen_linear_scm(&s).unwrap().dataset);
    }

    fn ols_slope(t: &[f64], y: &[f64]) -> f64 {
        let mt = mean(t);
        let my = mean(y);
        let sxy: f64 = t.iter().zip(y).map(|(a, b)| (a - mt) * (b - my)).sum();
        let sxx: f64 = t.iter().map(|a| (a - mt) * (a - mt)).sum();
        sxy / sxx
    }

    #[test]
    fn unconfounded_slope_matches_beta() {
        let s = gen_linear_scm(&LinearScmConfig { gamma: 0.0, n: 5000, seed: 1, ..Default::default() }).unwrap();
        let (t, _) = s.dataset.select_treatment("T").unwrap();
        let b = ols_slope(&t, s.dataset.outcome());
        assert!((b - 2.0).abs() < 0.1, "{b}");
    }

    #[test]
    fn confounded_slope_bias() {
        // gamma * delta * Var(X) / Var(T) = 0.8 / 1.64
        let s = gen_linear_scm(&LinearScmConfig { gamma: 0.8, n: 5000, seed: 2, ..Default::default() }).unwrap();
        let (t, _) = s.dataset.select_treatment("T").unwrap();
        let bias = ols_slope(&t, s.dataset.outcome()) - 2.0;
        assert!((bias - 0.8 / 1.64).abs() < 0.05, "{bias}");
        let var_t = crate::stats::sample_sd(&t).powi(2);
        assert!((var_t - 1.64).abs() < 0.1);
    }

    #[test]
    fn zero_effect_truth() {
        let s = gen_linear_scm(&LinearScmConfig { beta: 0.0, ..Default::default() }).unwrap();
        assert_eq!(s.truth.ace, 0.0);
        assert!(gen_linear_scm(&LinearScmConfig { noise_t: 0.0, ..Default::default() }).is_err());
    }
}
