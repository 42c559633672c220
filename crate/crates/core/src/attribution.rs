//! Per-feature causal attribution across estimators, contrastive explanations,
//! the partial-dependence baseline and cross-estimator agreement.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blackbox::ModelHandle;
use crate::config::RunConfig;
use crate::data::{AttributionReport, Dataset, EffectEstimate, Estimator, FeatureFailure};
use crate::effect::{ace, bootstrap_se, with_standard_error, Inference};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::weighting::estimate_weights;

fn estimator_index(e: Estimator) -> u64 {
    Estimator::ALL.iter().position(|x| *x == e).unwrap() as u64
}

/// Effect of one feature on the outcome, with every other feature as a covariate.
pub fn estimate_feature(d: &Dataset, feature: usize, estimator: Estimator, cfg: &RunConfig) -> Result<EffectEstimate> {
    let spec = d.specs().get(feature).ok_or_else(|| Error::UnknownFeature(format!("#{feature}")))?;
    let (t, v) = d.select_treatment(&spec.name)?;
    let settings = cfg.weighting();
    let w = estimate_weights(estimator, &t, &v, spec.kind, &settings)?;
    let mut est = ace(&spec.name, &t, d.outcome(), &w, spec.kind, Some(estimator))?;
    if cfg.inference == Inference::Bootstrap {
        let seed = derive_seed(cfg.seed, &[estimator_index(estimator), feature as u64]);
        let se = bootstrap_se(&t, d.outcome(), &v, spec.kind, estimator, &settings, cfg.bootstrap_reps, seed)?;
        est = with_standard_error(&est, se);
    }
    est.warnings.extend(w.warnings);
    Ok(est)
}

/// One report per configured estimator, in canonical estimator order. Tasks run
/// on `cfg.workers` threads (all cores when 0); the merged result does not
/// depend on the worker count.
pub fn attribute_all(d: &Dataset, cfg: &RunConfig) -> Result<Vec<AttributionReport>> {
    cfg.validate()?;
    if d.n_features() == 0 {
        return Err(Error::Precondition("dataset has no features".into()));
    }
    let estimators = cfg.ordered_estimators();
    let m = d.n_features();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidParams(format!("cannot start worker pool: {e}")))?;
    let tasks: Vec<(Estimator, usize)> = estimators.iter().flat_map(|&e| (0..m).map(move |j| (e, j))).collect();
    let results: Vec<Result<EffectEstimate>> =
        pool.install(|| tasks.par_iter().map(|&(e, j)| estimate_feature(d, j, e, cfg)).collect());

    let names = d.feature_names();
    let mut results = results.into_iter();
    let reports = estimators
        .iter()
        .map(|&e| {
            let mut estimates = Vec::new();
            let mut failures = Vec::new();
            for name in &names {
                match results.next().unwrap() {
                    Ok(est) => estimates.push(est),
                    Err(err) => failures.push(FeatureFailure { feature: name.clone(), error: err.to_string() }),
                }
            }
            AttributionReport::from_estimates(e, cfg.alpha, &names, estimates, failures)
        })
        .collect();
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveEntry {
    pub feature: String,
    pub attribution: f64,
    /// `x_a - x_b` on this feature.
    pub delta: f64,
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveExplanation {
    pub estimator: Estimator,
    pub sample_a: Vec<f64>,
    pub sample_b: Vec<f64>,
    /// Attributed features, largest `|contribution|` first.
    pub entries: Vec<ContrastiveEntry>,
}

impl ContrastiveExplanation {
    /// Entries whose contribution is nonzero.
    pub fn differences(&self) -> Vec<&ContrastiveEntry> {
        self.entries.iter().filter(|e| e.contribution != 0.0).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Contrastive explanation ({}): why output(a) differs from output(b)", self.estimator);
        let diffs = self.differences();
        if diffs.is_empty() {
            let _ = writeln!(s, "The samples agree on every causally attributed feature; no causal difference to report.");
            return s;
        }
        for (rank, e) in diffs.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:>2}. {:<12} contribution {:+.4}  (attribution {:+.4} x delta {:+.4})",
                rank + 1,
                e.feature,
                e.contribution,
                e.attribution,
                e.delta
            );
        }
        s
    }
}

pub fn contrastive_explain(report: &AttributionReport, x_a: &[f64], x_b: &[f64]) -> Result<ContrastiveExplanation> {
    let m = report.attributions.len();
    for x in [x_a, x_b] {
        if x.len() != m {
            return Err(Error::ArityMismatch { expected: m, got: x.len() });
        }
    }
    let mut entries: Vec<ContrastiveEntry> = report
        .attributions
        .iter()
        .enumerate()
        .filter(|(_, (_, a))| **a != 0.0)
        .map(|(j, (f, &a))| {
            let delta = x_a[j] - x_b[j];
            ContrastiveEntry { feature: f.clone(), attribution: a, delta, contribution: a * delta }
        })
        .collect();
    // Stable sort keeps feature order among ties.
    entries.sort_by(|a, b| b.contribution.abs().total_cmp(&a.contribution.abs()));
    Ok(ContrastiveExplanation { estimator: report.estimator, sample_a: x_a.to_vec(), sample_b: x_b.to_vec(), entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdpPoint {
    pub t: f64,
    pub value: f64,
}

/// Partial dependence of the model output on `feature`: at each of `grid`
/// evenly spaced values over the observed range, the mean prediction with that
/// feature overwritten on every sample.
pub fn pdp_baseline(model: &ModelHandle, d: &Dataset, feature: &str, grid: usize) -> Result<Vec<PdpPoint>> {
    if grid < 2 {
        return Err(Error::InvalidParams(format!("PDP grid needs at least 2 points, got {grid}")));
    }
    let j = d.feature_index(feature)?;
    let col = d.features().column(j);
    let lo = col.min();
    let hi = col.max();
    (0..grid)
        .map(|k| {
            let t = lo + (hi - lo) * k as f64 / (grid - 1) as f64;
            let mut x = d.features().clone();
            x.column_mut(j).fill(t);
            let y = model.predict_batch(&x)?;
            Ok(PdpPoint { t, value: y.iter().sum::<f64>() / y.len() as f64 })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cell {
    Positive,
    Negative,
    Zero,
    Failed,
}

impl Cell {
    fn symbol(self) -> &'static str {
        match self {
            Cell::Positive => "+",
            Cell::Negative => "-",
            Cell::Zero => "0",
            Cell::Failed => "failed",
        }
    }
}

/// Features x estimators grid of attribution signs. A feature has consensus
/// when every estimator produced an estimate and all agree on zero, positive
/// or negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementMatrix {
    pub features: Vec<String>,
    pub estimators: Vec<Estimator>,
    /// `cells[feature][estimator]`.
    pub cells: Vec<Vec<Cell>>,
    pub consensus: Vec<bool>,
}

impl AgreementMatrix {
    pub fn consensus_features(&self) -> Vec<&str> {
        self.pick(true)
    }

    pub fn disputed_features(&self) -> Vec<&str> {
        self.pick(false)
    }

    fn pick(&self, flag: bool) -> Vec<&str> {
        self.features
            .iter()
            .zip(&self.consensus)
            .filter(|(_, c)| **c == flag)
            .map(|(f, _)| f.as_str())
            .collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Feature |");
        for e in &self.estimators {
            let _ = write!(s, " {e} |");
        }
        s.push_str(" Consensus |\n|---|");
        s.push_str(&"---|".repeat(self.estimators.len() + 1));
        s.push('\n');
        for (k, f) in self.features.iter().enumerate() {
            let _ = write!(s, "| {f} |");
            for c in &self.cells[k] {
                let _ = write!(s, " {} |", c.symbol());
            }
            let _ = writeln!(s, " {} |", if self.consensus[k] { "yes" } else { "no" });
        }
        let consensus = self.consensus_features();
        let disputed = self.disputed_features();
        let list = |v: &[&str]| if v.is_empty() { "none".to_string() } else { v.join(", ") };
        let _ = writeln!(s, "\nConsensus ({}): {}", consensus.len(), list(&consensus));
        let _ = writeln!(s, "Disputed ({}): {}", disputed.len(), list(&disputed));
        s
    }
}

pub fn agreement(reports: &[AttributionReport]) -> Result<AgreementMatrix> {
    let first = reports.first().ok_or_else(|| Error::IncompatibleReports("no reports given".into()))?;
    let features: Vec<String> = first.attributions.keys().cloned().collect();
    for r in &reports[1..] {
        if !r.attributions.keys().eq(features.iter()) {
            return Err(Error::IncompatibleReports(format!(
                "{} and {} reports cover different features",
                first.estimator, r.estimator
            )));
        }
    }
    let cells: Vec<Vec<Cell>> = features
        .iter()
        .map(|f| {
            reports
                .iter()
                .map(|r| {
                    if r.failures.iter().any(|x| &x.feature == f) {
                        return Cell::Failed;
                    }
                    let a = r.attributions[f];
                    if a > 0.0 {
                        Cell::Positive
                    } else if a < 0.0 {
                        Cell::Negative
                    } else {
                        Cell::Zero
                    }
                })
                .collect()
        })
        .collect();
    let consensus = cells
        .iter()
        .map(|row| row[0] != Cell::Failed && row.iter().all(|c| *c == row[0]))
        .collect();
    Ok(AgreementMatrix { features, estimators: reports.iter().map(|r| r.estimator).collect(), cells, consensus })
}

fn format_p(p: f64) -> String {
    if p < 0.01 {
        "<0.01".into()
    } else {
        format!("{p:.2}")
    }
}

/// Markdown table with one row per feature and an `Est.` / `P` column pair per report.
pub fn render_markdown(reports: &[AttributionReport]) -> Result<String> {
    let agreement = agreement(reports)?;
    let mut s = String::from("| Feature |");
    for r in reports {
        let _ = write!(s, " {0} Est. | {0} P |", r.estimator);
    }
    s.push_str("\n|---|");
    s.push_str(&"---:|".repeat(2 * reports.len()));
    s.push('\n');
    for f in &agreement.features {
        let _ = write!(s, "| {f} |");
        for r in reports {
            match r.estimate(f) {
                Some(e) => {
                    let _ = write!(s, " {:.2} | {} |", e.mu, format_p(e.p_value));
                }
                None => s.push_str(" failed | failed |"),
            }
        }
        s.push('\n');
    }
    Ok(s)
}
