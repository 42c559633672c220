//! Opaque model adapters and construction of the observational table.
//!
//! A model is only ever queried through [`ModelHandle::predict_batch`]; the
//! attribution pipeline never looks inside it.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpOutput {
    /// The single unit of the last layer is the output.
    Scalar,
    /// The last layer emits logits; one unit goes through a sigmoid, several
    /// through a softmax. The output is the probability of class 1.
    ClassProbability,
}

/// One dense layer. `weights[k]` holds the incoming weights of output unit `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layers: Vec<Layer>,
    pub output: MlpOutput,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::InvalidModel("no layers".into()))?;
        let mut width = first.weights.first().map_or(0, Vec::len);
        if width == 0 {
            return Err(Error::InvalidModel("first layer has no inputs".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.weights.is_empty() || layer.weights.len() != layer.bias.len() {
                return Err(Error::InvalidModel(format!(
                    "layer {l}: {} weight rows vs {} biases",
                    layer.weights.len(),
                    layer.bias.len()
                )));
            }
            if layer.weights.iter().any(|row| row.len() != width) {
                return Err(Error::InvalidModel(format!(
                    "layer {l}: expected {width} inputs per unit"
                )));
            }
            if layer.weights.iter().flatten().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(Error::InvalidModel(format!("layer {l}: non-finite parameter")));
            }
            width = layer.bias.len();
        }
        if self.output == MlpOutput::Scalar && width != 1 {
            return Err(Error::InvalidModel(format!(
                "scalar output needs a final width of 1, got {width}"
            )));
        }
        Ok(())
    }

    pub fn input_arity(&self) -> usize {
        self.layers[0].weights[0].len()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: MlpSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn forward(&self, mats: &[(DMatrix<f64>, DVector<f64>)], x: DVector<f64>) -> f64 {
        let mut h = x;
        for ((w, b), layer) in mats.iter().zip(&self.layers) {
            h = (w * h + b).map(|v| layer.activation.apply(v));
        }
        match self.output {
            MlpOutput::Scalar => h[0],
            MlpOutput::ClassProbability if h.len() == 1 => sigmoid(h[0]),
            MlpOutput::ClassProbability => {
                let max = h.max();
                let exps = h.map(|v| (v - max).exp());
                exps[1] / exps.sum()
            }
        }
    }

    fn matrices(&self) -> Vec<(DMatrix<f64>, DVector<f64>)> {
        self.layers
            .iter()
            .map(|l| {
                let rows = l.weights.len();
                let cols = l.weights[0].len();
                let flat: Vec<f64> = l.weights.iter().flatten().copied().collect();
                (DMatrix::from_row_slice(rows, cols, &flat), DVector::from_column_slice(&l.bias))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub enum ModelKind {
    BuiltinMlp(MlpSpec),
    /// Shell command speaking the line-delimited JSON protocol.
    Subprocess { command: String, timeout: Duration },
    /// Outputs recorded elsewhere, looked up by exact input row.
    Table { arity: usize, outputs: HashMap<Vec<u64>, f64> },
}

#[derive(Debug, Clone)]
pub struct ModelHandle {
    pub kind: ModelKind,
    /// Report hard 0/1 labels (threshold 0.5) instead of the raw output.
    pub hard_labels: bool,
}

fn row_key(row: impl IntoIterator<Item = f64>) -> Vec<u64> {
    // -0.0 and 0.0 must map to the same key.
    row.into_iter().map(|v| if v == 0.0 { 0 } else { v.to_bits() }).collect()
}

impl ModelHandle {
    pub fn mlp(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { kind: ModelKind::BuiltinMlp(spec), hard_labels: false })
    }

    pub fn subprocess(command: impl Into<String>, timeout: Duration) -> Self {
        Self {
            kind: ModelKind::Subprocess { command: command.into(), timeout },
            hard_labels: false,
        }
    }

    pub fn table(inputs: &DMatrix<f64>, outputs: &[f64]) -> Result<Self> {
        if inputs.nrows() != outputs.len() {
            return Err(Error::InvalidModel(format!(
                "{} input rows vs {} outputs",
                inputs.nrows(),
                outputs.len()
            )));
        }
        let map = inputs
            .row_iter()
            .zip(outputs)
            .map(|(r, &y)| (row_key(r.iter().copied()), y))
            .collect();
        Ok(Self {
            kind: ModelKind::Table { arity: inputs.ncols(), outputs: map },
            hard_labels: false,
        })
    }

    /// Parses a CLI model reference: `cmd:<shell command>` or a path to an MLP JSON file.
    pub fn from_reference(reference: &str, timeout: Duration) -> Result<Self> {
        match reference.strip_prefix("cmd:") {
            Some(cmd) => Ok(Self::subprocess(cmd, timeout)),
            None => Self::mlp(MlpSpec::load(reference)?),
        }
    }

    pub fn with_hard_labels(mut self, on: bool) -> Self {
        self.hard_labels = on;
        self
    }

    pub fn arity(&self) -> Option<usize> {
        match &self.kind {
            ModelKind::BuiltinMlp(spec) => Some(spec.input_arity()),
            ModelKind::Subprocess { .. } => None,
            ModelKind::Table { arity, .. } => Some(*arity),
        }
    }

    pub fn predict_batch(&self, inputs: &DMatrix<f64>) -> Result<Vec<f64>> {
        if let Some(expected) = self.arity() {
            if inputs.ncols() != expected {
                return Err(Error::ArityMismatch { expected, got: inputs.ncols() });
            }
        }
        let raw = match &self.kind {
            ModelKind::BuiltinMlp(spec) => {
                let mats = spec.matrices();
                inputs
                    .row_iter()
                    .map(|r| spec.forward(&mats, r.transpose()))
                    .collect()
            }
            ModelKind::Subprocess { command, timeout } => subprocess_probe(command, inputs, *timeout)?,
            ModelKind::Table { outputs, .. } => inputs
                .row_iter()
                .enumerate()
                .map(|(i, r)| {
                    outputs.get(&row_key(r.iter().copied())).copied().ok_or_else(|| {
                        Error::InvalidModel(format!("row {i} is not present in the output table"))
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let mut out: Vec<f64> = raw;
        if let Some(row) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteOutput { row });
        }
        if self.hard_labels {
            out.iter_mut().for_each(|y| *y = if *y >= 0.5 { 1.0 } else { 0.0 });
        }
        Ok(out)
    }
}

#[derive(Serialize)]
struct ProbeRequest<'a> {
    x: &'a [f64],
}

#[derive(Deserialize)]
struct ProbeResponse {
    y: f64,
}

struct KillOnDrop(Child);

impl Drop for KillOnDrop {
    fn drop(&mut self) {
        if let Ok(None) = self.0.try_wait() {
            let _ = self.0.kill();
            let _ = self.0.wait();
        }
    }
}

/// Queries a subprocess model one row at a time.
///
/// The command runs under `sh -c`. For each row a line `{"x":[...]}` is
/// written to its stdin and one line `{"y":<number>}` is read back. `timeout`
/// bounds the whole batch including process exit.
pub fn subprocess_probe(command: &str, inputs: &DMatrix<f64>, timeout: Duration) -> Result<Vec<f64>> {
    let deadline = Instant::now() + timeout;
    let child = Command::new("sh")
        .arg("-c")
        .arg(command)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::Subprocess(format!("cannot launch `{command}`: {e}")))?;
    let mut child = KillOnDrop(child);

    let stdout = child.0.stdout.take().expect("piped stdout");
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    let mut stderr = child.0.stderr.take().expect("piped stderr");
    let err_thread = std::thread::spawn(move || {
        let mut s = String::new();
        let _ = stderr.read_to_string(&mut s);
        s
    });

    let mut stdin = child.0.stdin.take().expect("piped stdin");
    let mut outputs = Vec::with_capacity(inputs.nrows());
    for row in inputs.row_iter() {
        let x: Vec<f64> = row.iter().copied().collect();
        let mut line = serde_json::to_string(&ProbeRequest { x: &x })?;
        line.push('\n');
        stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| Error::Subprocess(format!("write to model failed: {e}")))?;
        let remaining = deadline.saturating_duration_since(Instant::now());
        let reply = match rx.recv_timeout(remaining) {
            Ok(Ok(reply)) => reply,
            Ok(Err(e)) => return Err(Error::Subprocess(format!("read from model failed: {e}"))),
            Err(mpsc::RecvTimeoutError::Timeout) => return Err(Error::Timeout(timeout)),
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                let status = child.0.wait().ok();
                let msg = err_thread.join().unwrap_or_default();
                return Err(Error::Subprocess(format!(
                    "model closed its output early (status {status:?}): {}",
                    msg.trim()
                )));
            }
        };
        let resp: ProbeResponse = serde_json::from_str(reply.trim())
            .map_err(|_| Error::MalformedResponse(reply.trim().to_string()))?;
        outputs.push(resp.y);
    }
    drop(stdin);

    loop {
        if let Some(status) = child.0.try_wait()? {
            if !status.success() {
                let msg = err_thread.join().unwrap_or_default();
                return Err(Error::Subprocess(format!("model exited with {status}: {}", msg.trim())));
            }
            break;
        }
        if Instant::now() >= deadline {
            return Err(Error::Timeout(timeout));
        }
        std::thread::sleep(Duration::from_millis(2));
    }
    Ok(outputs)
}

/// Probes `model` over `inputs` and packages the result as a dataset.
pub fn build_observational_table(model: &ModelHandle, inputs: &DMatrix<f64>, specs: Vec<FeatureSpec>) -> Result<Dataset> {
    if inputs.nrows() < 2 {
        return Err(Error::Precondition(format!(
            "need at least 2 input rows, got {}",
            inputs.nrows()
        )));
    }
    let y = model.predict_batch(inputs)?;
    Dataset::new(inputs.clone(), specs, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(weights: Vec<Vec<f64>>, bias: Vec<f64>, activation: Activation) -> Layer {
        Layer { weights, bias, activation }
    }

    #[test]
    fn identity_mlp() {
        let spec = MlpSpec {
            layers: vec![layer(vec![vec![1.0]], vec![0.0], Activation::Identity)],
            output: MlpOutput::Scalar,
        };
        let m = ModelHandle::mlp(spec).unwrap();
        let y = m.predict_batch(&DMatrix::from_row_slice(1, 1, &[3.0])).unwrap();
        assert_eq!(y, vec![3.0]);
    }

    #[test]
    fn sigmoid_of_sum() {
        let spec = MlpSpec {
            layers: vec![layer(vec![vec![1.0, 1.0]], vec![0.0], Activation::Sigmoid)],
            output: MlpOutput::Scalar,
        };
        let m = ModelHandle::mlp(spec.clone()).unwrap();
        assert_eq!(m.predict_batch(&DMatrix::zeros(1, 2)).unwrap(), vec![0.5]);
        let p = MlpSpec { output: MlpOutput::ClassProbability, ..spec };
        let p = MlpSpec {
            layers: vec![layer(vec![vec![1.0, 1.0]], vec![0.0], Activation::Identity)],
            ..p
        };
        let m = ModelHandle::mlp(p).unwrap();
        assert_eq!(m.predict_batch(&DMatrix::zeros(1, 2)).unwrap(), vec![0.5]);
    }

    #[test]
    fn softmax_output_and_hard_labels() {
        let spec = MlpSpec {
            layers: vec![layer(vec![vec![0.0], vec![1.0]], vec![0.0, 0.0], Activation::Identity)],
            output: MlpOutput::ClassProbability,
        };
        let m = ModelHandle::mlp(spec).unwrap();
        let x = DMatrix::from_row_slice(2, 1, &[2.0, -2.0]);
        let y = m.predict_batch(&x).unwrap();
        assert!((y[0] - sigmoid(2.0)).abs() < 1e-12);
        let m = m.with_hard_labels(true);
        assert_eq!(m.predict_batch(&x).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn spec_validation() {
        let bad = MlpSpec {
            layers: vec![
                layer(vec![vec![1.0, 2.0]], vec![0.0], Activation::Relu),
                layer(vec![vec![1.0, 1.0]], vec![0.0], Activation::Identity),
            ],
            output: MlpOutput::Scalar,
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidModel(_))));
        let json = r#"{"layers":[{"weights":[[1.0,2.0]],"bias":[0.5],"activation":"tanh"}],"output":"scalar"}"#;
        let spec = MlpSpec::from_json(json).unwrap();
        assert_eq!(spec.input_arity(), 2);
        assert!(MlpSpec::from_json(r#"{"layers":[],"output":"scalar"}"#).is_err());
    }

    #[test]
    fn arity_mismatch() {
        let spec = MlpSpec {
            layers: vec![layer(vec![vec![1.0]], vec![0.0], Activation::Identity)],
            output: MlpOutput::Scalar,
        };
        let m = ModelHandle::mlp(spec).unwrap();
        assert!(matches!(
            m.predict_batch(&DMatrix::zeros(2, 3)),
            Err(Error::ArityMismatch { expected: 1, got: 3 })
        ));
    }

    #[test]
    fn table_model_echoes() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 0.0, -0.0]);
        let m = ModelHandle::table(&x, &[10.0, 20.0, 30.0]).unwrap();
        let d = build_observational_table(&m, &x, vec![FeatureSpec::continuous("a"), FeatureSpec::continuous("b")]).unwrap();
        assert_eq!(d.outcome(), &[10.0, 20.0, 30.0]);
        let other = DMatrix::from_row_slice(1, 2, &[9.0, 9.0]);
        assert!(m.predict_batch(&other).is_err());
    }

    #[test]
    fn too_few_rows() {
        let x = DMatrix::from_row_slice(1, 1, &[1.0]);
        let m = ModelHandle::table(&x, &[1.0]).unwrap();
        assert!(matches!(
            build_observational_table(&m, &x, vec![FeatureSpec::continuous("a")]),
            Err(Error::Precondition(_))
        ));
    }
}
