//! Shared test fixtures: a tiny deterministic trainer for the synthetic
//! classifier and dataset helpers.
#![allow(dead_code)]

use causal_probe::blackbox::{build_observational_table, Activation, Layer, MlpOutput, MlpSpec, ModelHandle};
use causal_probe::data::{Dataset, FeatureSpec};
use causal_probe::rng::rng_from_seed;
use causal_probe::synth::{gen_synthetic, synth_feature_names, SynthConfig};
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { hidden: 8, epochs: 300, lr: 0.01, l2: 1e-3, seed: 1 }
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let (b1, b2) = (0.9, 0.999);
        for k in 0..params.len() {
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * grad[k];
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * grad[k] * grad[k];
            let mh = self.m[k] / (1.0 - b1.powi(self.step));
            let vh = self.v[k] / (1.0 - b2.powi(self.step));
            params[k] -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }
}

/// Full-batch Adam on cross-entropy plus an L2 penalty for a
/// `m -> hidden (tanh) -> 1 (logit)` network.
pub fn train_classifier(x: &DMatrix<f64>, labels: &[f64], cfg: &TrainConfig) -> MlpSpec {
    let (n, m) = x.shape();
    let h = cfg.hidden;
    let mut rng = rng_from_seed(cfg.seed);
    let mut normal = |scale: f64| -> f64 {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    };
    // Parameter layout: W1 (h x m, row-major), b1 (h), w2 (h), b2.
    let mut p: Vec<f64> = (0..h * m).map(|_| normal((1.0 / m as f64).sqrt())).collect();
    p.extend(std::iter::repeat_n(0.0, h));
    p.extend((0..h).map(|_| normal((1.0 / h as f64).sqrt())));
    p.push(0.0);
    let (o_b1, o_w2, o_b2) = (h * m, h * m + h, h * m + 2 * h);
    let mut adam = Adam::new(p.len());
    for _ in 0..cfg.epochs {
        let w1 = DMatrix::from_row_slice(h, m, &p[..o_b1]);
        let b1 = DVector::from_column_slice(&p[o_b1..o_w2]);
        let w2 = DVector::from_column_slice(&p[o_w2..o_b2]);
        let mut g = vec![0.0; p.len()];
        for i in 0..n {
            let xi = x.row(i).transpose();
            let a = (&w1 * &xi + &b1).map(f64::tanh);
            let z = w2.dot(&a) + p[o_b2];
            let pr = 1.0 / (1.0 + (-z).exp());
            let dz = (pr - labels[i]) / n as f64;
            g[o_b2] += dz;
            for k in 0..h {
                g[o_w2 + k] += dz * a[k];
                let da = dz * w2[k] * (1.0 - a[k] * a[k]);
                g[o_b1 + k] += da;
                for j in 0..m {
                    g[k * m + j] += da * xi[j];
                }
            }
        }
        for k in 0..o_b1 {
            g[k] += cfg.l2 * p[k];
        }
        for k in o_w2..o_b2 {
            g[k] += cfg.l2 * p[k];
        }
        adam.update(&mut p, &g, cfg.lr);
    }
    let hidden = Layer {
        weights: (0..h).map(|k| p[k * m..(k + 1) * m].to_vec()).collect(),
        bias: p[o_b1..o_w2].to_vec(),
        activation: Activation::Tanh,
    };
    let out = Layer { weights: vec![p[o_w2..o_b2].to_vec()], bias: vec![p[o_b2]], activation: Activation::Identity };
    MlpSpec { layers: vec![hidden, out], output: MlpOutput::ClassProbability }
}

pub fn accuracy(model: &ModelHandle, x: &DMatrix<f64>, labels: &[f64]) -> f64 {
    let p = model.predict_batch(x).unwrap();
    let hits = p.iter().zip(labels).filter(|(p, l)| (**p > 0.5) == (**l > 0.5)).count();
    hits as f64 / labels.len() as f64
}

pub const SYNTH_SEED: u64 = 7;

/// The synthetic benchmark, its trained classifier and the probed dataset.
pub fn synthetic_pipeline(seed: u64, train: &TrainConfig) -> (ModelHandle, Dataset, Vec<f64>) {
    let (x, labels) = gen_synthetic(&SynthConfig { n: 1000, seed, ..Default::default() }).unwrap();
    let model = ModelHandle::mlp(train_classifier(&x, &labels, train)).unwrap();
    let specs = synth_feature_names().into_iter().map(FeatureSpec::continuous).collect();
    let d = build_observational_table(&model, &x, specs).unwrap();
    (model, d, labels)
}
