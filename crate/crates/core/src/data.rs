//! Domain types shared by every stage: the observational table, balancing
//! weights, effect estimates and attribution reports.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
}

impl FeatureSpec {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self { name: name.into(), kind: FeatureKind::Continuous }
    }

    pub fn binary(name: impl Into<String>) -> Self {
        Self { name: name.into(), kind: FeatureKind::Binary }
    }
}

/// Infers the kind of a column: binary iff it takes exactly the values {0, 1}.
pub fn detect_kind(values: impl IntoIterator<Item = f64>) -> FeatureKind {
    let (mut zero, mut one) = (false, false);
    for v in values {
        if v == 0.0 {
            zero = true;
        } else if v == 1.0 {
            one = true;
        } else {
            return FeatureKind::Continuous;
        }
    }
    if zero && one {
        FeatureKind::Binary
    } else {
        FeatureKind::Continuous
    }
}

/// Immutable table of `n` samples over `m` named features plus the model output.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DMatrix<f64>,
    specs: Vec<FeatureSpec>,
    outcome: Vec<f64>,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, specs: Vec<FeatureSpec>, outcome: Vec<f64>) -> Result<Self> {
        let (n, m) = features.shape();
        if n < 2 {
            return Err(Error::InvalidDataset(format!("need at least 2 samples, got {n}")));
        }
        if m < 1 {
            return Err(Error::InvalidDataset("need at least 1 feature".into()));
        }
        if specs.len() != m {
            return Err(Error::InvalidDataset(format!(
                "{} feature specs for {m} columns",
                specs.len()
            )));
        }
        if outcome.len() != n {
            return Err(Error::InvalidDataset(format!(
                "outcome has {} entries for {n} rows",
                outcome.len()
            )));
        }
        let mut seen = HashSet::new();
        for s in &specs {
            if !seen.insert(s.name.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate feature name `{}`", s.name)));
            }
        }
        if features.iter().chain(outcome.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("non-finite value".into()));
        }
        for (j, s) in specs.iter().enumerate() {
            if s.kind == FeatureKind::Binary && features.column(j).iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidDataset(format!(
                    "binary feature `{}` has values outside {{0, 1}}",
                    s.name
                )));
            }
        }
        Ok(Self { features, specs, outcome })
    }

    /// Builds a dataset with feature kinds auto-detected from the column values.
    pub fn with_detected_kinds(features: DMatrix<f64>, names: Vec<String>, outcome: Vec<f64>) -> Result<Self> {
        let specs = names
            .into_iter()
            .enumerate()
            .map(|(j, name)| {
                let kind = if j < features.ncols() {
                    detect_kind(features.column(j).iter().copied())
                } else {
                    FeatureKind::Continuous
                };
                FeatureSpec { name, kind }
            })
            .collect();
        Self::new(features, specs, outcome)
    }

    /// Returns a copy with the kind of `name` overridden.
    pub fn with_kind(&self, name: &str, kind: FeatureKind) -> Result<Self> {
        let j = self.feature_index(name)?;
        let mut specs = self.specs.clone();
        specs[j].kind = kind;
        Self::new(self.features.clone(), specs, self.outcome.clone())
    }

    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn specs(&self) -> &[FeatureSpec] {
        &self.specs
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.name.clone()).collect()
    }

    pub fn feature_index(&self, name: &str) -> Result<usize> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::UnknownFeature(name.to_string()))
    }

    /// Splits the table into the named treatment column and the remaining
    /// covariates, in original column order.
    pub fn select_treatment(&self, feature: &str) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let j = self.feature_index(feature)?;
        let treatment = self.features.column(j).iter().copied().collect();
        Ok((treatment, self.features.clone().remove_column(j)))
    }
}

/// Serialized by upper-case name; parsing is case-insensitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Estimator {
    Cbps,
    Npcbps,
    Pswgbm,
    Iptw,
    Optweight,
    Super,
}

impl Estimator {
    /// All six estimators, in report column order.
    pub const ALL: [Estimator; 6] = [
        Estimator::Cbps,
        Estimator::Npcbps,
        Estimator::Pswgbm,
        Estimator::Iptw,
        Estimator::Optweight,
        Estimator::Super,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Estimator::Iptw => "IPTW",
            Estimator::Cbps => "CBPS",
            Estimator::Npcbps => "NPCBPS",
            Estimator::Pswgbm => "PSWGBM",
            Estimator::Optweight => "OPTWEIGHT",
            Estimator::Super => "SUPER",
        }
    }

    /// Weights built from a fitted treatment density ratio (as opposed to a
    /// constrained optimizer).
    pub fn is_density_ratio(&self) -> bool {
        matches!(self, Estimator::Iptw | Estimator::Cbps | Estimator::Pswgbm | Estimator::Super)
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl TryFrom<String> for Estimator {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Estimator> for String {
    fn from(e: Estimator) -> String {
        e.as_str().to_string()
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidParams(format!("unknown estimator `{s}`")))
    }
}

/// Nonnegative per-sample weights in canonical form (mean 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub ess: f64,
    pub estimator: Option<Estimator>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl WeightVector {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn with_estimator(mut self, estimator: Estimator) -> Self {
        self.estimator = Some(estimator);
        self
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        self.warnings.push(msg.into());
    }
}

pub fn effective_sample_size(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|x| x * x).sum();
    s * s / s2
}

/// Rescales raw nonnegative weights to sum to `n`.
pub fn normalize_weights(raw: &[f64]) -> Result<WeightVector> {
    if raw.is_empty() {
        return Err(Error::InvalidWeights("empty weight vector".into()));
    }
    if let Some(bad) = raw.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidWeights(format!("entry {bad} is negative or non-finite")));
    }
    let max = raw.iter().fold(0.0_f64, |a, &b| a.max(b));
    if max <= 0.0 {
        return Err(Error::InvalidWeights("all weights are zero".into()));
    }
    // Pre-scale by the max so huge or tiny raw values do not overflow the sum.
    let scaled: Vec<f64> = raw.iter().map(|w| w / max).collect();
    let sum: f64 = scaled.iter().sum();
    let n = raw.len() as f64;
    let weights: Vec<f64> = scaled.iter().map(|w| w * n / sum).collect();
    let ess = effective_sample_size(&weights).clamp(1.0, n);
    Ok(WeightVector { weights, ess, estimator: None, warnings: Vec::new() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub feature: String,
    /// ACE per unit of treatment; for binary treatments the contrast of levels.
    pub mu: f64,
    pub se: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub estimator: Option<Estimator>,
    pub kind: FeatureKind,
    pub n_eff: f64,
    /// `exp(mu)` for binary treatments, for a multiplicative reading.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exp_mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFailure {
    pub feature: String,
    pub error: String,
}

/// Causal attribution vector for one estimator: `a_j = mu_j` when the effect
/// is significant at `alpha`, else zero. Features whose estimation failed are
/// listed in `failures` and carry a zero attribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub estimator: Estimator,
    pub alpha: f64,
    pub attributions: IndexMap<String, f64>,
    pub estimates: Vec<EffectEstimate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<FeatureFailure>,
}

impl AttributionReport {
    /// `features` fixes the order of the attribution vector.
    pub fn from_estimates(
        estimator: Estimator,
        alpha: f64,
        features: &[String],
        estimates: Vec<EffectEstimate>,
        failures: Vec<FeatureFailure>,
    ) -> Self {
        let attributions = features
            .iter()
            .map(|f| {
                let a = match estimates.iter().find(|e| &e.feature == f) {
                    Some(e) if e.p_value < alpha => e.mu,
                    _ => 0.0,
                };
                (f.clone(), a)
            })
            .collect();
        Self { estimator, alpha, attributions, estimates, failures }
    }

    pub fn estimate(&self, feature: &str) -> Option<&EffectEstimate> {
        self.estimates.iter().find(|e| e.feature == feature)
    }

    pub fn attribution(&self, feature: &str) -> Option<f64> {
        self.attributions.get(feature).copied()
    }

    /// Features with a nonzero attribution, in report order.
    pub fn attributed_features(&self) -> Vec<&str> {
        self.attributions
            .iter()
            .filter(|(_, a)| **a != 0.0)
            .map(|(f, _)| f.as_str())
            .collect()
    }
}

/// A numeric CSV table: header names plus an `n x k` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub values: DMatrix<f64>,
}

impl Table {
    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::ColumnNotFound(name.to_string()))
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        if headers.is_empty() {
            return Err(Error::InvalidDataset("empty header".into()));
        }
        let mut data = Vec::new();
        let mut nrows = 0;
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            for (c, field) in rec.iter().enumerate() {
                let field = field.trim();
                if field.is_empty() {
                    return Err(Error::InvalidDataset(format!(
                        "missing value at row {}, column `{}`",
                        r + 1,
                        headers[c]
                    )));
                }
                let v: f64 = field.parse().map_err(|_| {
                    Error::InvalidDataset(format!(
                        "non-numeric value `{field}` at row {}, column `{}`",
                        r + 1,
                        headers[c]
                    ))
                })?;
                if !v.is_finite() {
                    return Err(Error::InvalidDataset(format!(
                        "non-finite value at row {}, column `{}`",
                        r + 1,
                        headers[c]
                    )));
                }
                data.push(v);
            }
            nrows += 1;
        }
        let values = DMatrix::from_row_slice(nrows, headers.len(), &data);
        Ok(Self { headers, values })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn to_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.headers)?;
        for row in self.values.row_iter() {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_writer(std::fs::File::create(path)?)
    }

    /// Drops the named columns.
    pub fn without(&self, drop: &[String]) -> Result<Self> {
        for d in drop {
            self.column_index(d)?;
        }
        let keep: Vec<usize> = (0..self.headers.len())
            .filter(|&j| !drop.contains(&self.headers[j]))
            .collect();
        let headers = keep.iter().map(|&j| self.headers[j].clone()).collect();
        let values = self.values.select_columns(&keep);
        Ok(Self { headers, values })
    }

    /// Splits off `outcome` as the model output; all remaining columns become features.
    pub fn into_dataset(self, outcome: &str) -> Result<Dataset> {
        let k = self.column_index(outcome)?;
        let y: Vec<f64> = self.values.column(k).iter().copied().collect();
        let names: Vec<String> = self
            .headers
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != k)
            .map(|(_, h)| h.clone())
            .collect();
        let x = self.values.remove_column(k);
        Dataset::with_detected_kinds(x, names, y)
    }
}
