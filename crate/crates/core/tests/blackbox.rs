use std::time::Duration;

use causal_probe::blackbox::{build_observational_table, subprocess_probe, Activation, Layer, MlpOutput, MlpSpec, ModelHandle};
use causal_probe::data::FeatureSpec;
use causal_probe::error::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;

// POSIX sh loops: some awks buffer stdin and would never answer line by line.
const ECHO: &str = r#"while IFS= read -r l; do x=${l#*[}; echo "{\"y\":${x%%[],]*}}"; done"#;
const AFFINE: &str = r#"while IFS= read -r l; do x=${l#*[}; awk -v x="${x%%[],]*}" 'BEGIN { printf "{\"y\":%.17g}\n", 2 * x + 1 }'; done"#;
const BANANA: &str = "while read -r l; do echo banana; done";
const TIMEOUT: Duration = Duration::from_secs(20);

fn rows() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 2, &[1.5, 9.0, -2.0, 0.0, 0.25, 4.0])
}

#[test]
fn echo_harness_returns_first_column() {
    let y = subprocess_probe(ECHO, &rows(), TIMEOUT).unwrap();
    assert_eq!(y, [1.5, -2.0, 0.25]);
}

#[test]
fn affine_harness() {
    let model = ModelHandle::subprocess(AFFINE, TIMEOUT);
    assert_eq!(model.predict_batch(&rows()).unwrap(), [4.0, -3.0, 1.5]);
    // Determinism across probes.
    assert_eq!(model.predict_batch(&rows()).unwrap(), model.predict_batch(&rows()).unwrap());
}

#[test]
fn malformed_response() {
    let err = subprocess_probe(BANANA, &rows(), TIMEOUT).unwrap_err();
    assert!(matches!(err, Error::MalformedResponse(ref s) if s == "banana"), "{err}");
}

#[test]
fn nonzero_exit_and_timeout() {
    let err = subprocess_probe("echo oops >&2; exit 3", &rows(), TIMEOUT).unwrap_err();
    assert!(matches!(err, Error::Subprocess(ref s) if s.contains("oops")), "{err}");
    let err = subprocess_probe("sleep 5", &rows(), Duration::from_millis(200)).unwrap_err();
    assert!(matches!(err, Error::Timeout(_)), "{err}");
    let err = subprocess_probe("read line; echo '{\"y\":1}'; exit 1", &rows(), TIMEOUT).unwrap_err();
    assert!(matches!(err, Error::Subprocess(_)), "{err}");
}

#[test]
fn non_finite_output_is_rejected() {
    let model = ModelHandle::subprocess(r#"while read -r l; do echo '{"y":1e999}'; done"#, TIMEOUT);
    assert!(model.predict_batch(&rows()).is_err());
}

#[test]
fn hand_fixed_two_layer_network() {
    let spec = MlpSpec {
        layers: vec![
            Layer {
                weights: vec![vec![1.0, -1.0, 0.5], vec![0.0, 2.0, 1.0]],
                bias: vec![0.5, -1.0],
                activation: Activation::Relu,
            },
            Layer { weights: vec![vec![1.0, 3.0]], bias: vec![0.25], activation: Activation::Identity },
        ],
        output: MlpOutput::Scalar,
    };
    let model = ModelHandle::mlp(spec).unwrap();
    let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 4.0, -1.0, 0.0, 0.0]);
    // Row 1: hidden = relu([1-2+2+0.5, 4+4-1]) = [1.5, 7] -> 1.5 + 21 + 0.25.
    // Row 2: hidden = relu([-1+0.5, -1]) = [0, 0] -> 0.25.
    assert_eq!(model.predict_batch(&x).unwrap(), [22.75, 0.25]);
}

fn naive_forward(spec: &MlpSpec, x: &[f64]) -> f64 {
    let mut h = x.to_vec();
    for layer in &spec.layers {
        h = layer
            .weights
            .iter()
            .zip(&layer.bias)
            .map(|(row, b)| {
                let mut s = *b;
                for k in 0..row.len() {
                    s += row[k] * h[k];
                }
                match layer.activation {
                    Activation::Relu => s.max(0.0),
                    Activation::Tanh => s.tanh(),
                    Activation::Sigmoid => 1.0 / (1.0 + (-s).exp()),
                    Activation::Identity => s,
                }
            })
            .collect();
    }
    match spec.output {
        MlpOutput::Scalar => h[0],
        MlpOutput::ClassProbability if h.len() == 1 => 1.0 / (1.0 + (-h[0]).exp()),
        MlpOutput::ClassProbability => {
            let z: f64 = h.iter().map(|v| v.exp()).sum();
            h[1].exp() / z
        }
    }
}

fn arb_spec() -> impl Strategy<Value = (MlpSpec, Vec<f64>)> {
    (1usize..5, proptest::collection::vec(1usize..5, 1..4), 0usize..4, any::<bool>()).prop_flat_map(
        |(inputs, widths, act, prob)| {
            let mut dims = vec![inputs];
            dims.extend(&widths);
            let n_params: usize = dims.windows(2).map(|d| d[0] * d[1] + d[1]).sum();
            (
                proptest::collection::vec(-2.0f64..2.0, n_params),
                proptest::collection::vec(-3.0f64..3.0, inputs),
                Just((dims, act, prob)),
            )
        },
    )
    .prop_map(|(params, x, (dims, act, prob))| {
        let acts = [Activation::Relu, Activation::Tanh, Activation::Sigmoid, Activation::Identity];
        let mut it = params.into_iter();
        let layers = dims
            .windows(2)
            .map(|d| Layer {
                weights: (0..d[1]).map(|_| (0..d[0]).map(|_| it.next().unwrap()).collect()).collect(),
                bias: (0..d[1]).map(|_| it.next().unwrap()).collect(),
                activation: acts[act],
            })
            .collect::<Vec<_>>();
        let scalar = !prob && *dims.last().unwrap() == 1;
        let output = if scalar { MlpOutput::Scalar } else { MlpOutput::ClassProbability };
        (MlpSpec { layers, output }, x)
    })
}

proptest! {
    #[test]
    fn mlp_matches_naive_forward((spec, x) in arb_spec()) {
        let expected = naive_forward(&spec, &x);
        let model = ModelHandle::mlp(spec).unwrap();
        let got = model.predict_batch(&DMatrix::from_row_slice(1, x.len(), &x)).unwrap()[0];
        prop_assert!((got - expected).abs() < 1e-12, "{} vs {}", got, expected);
    }

    #[test]
    fn observational_table_rows_stay_aligned(seed in 0u64..500) {
        use rand::seq::SliceRandom;
        let mut rng = causal_probe::rng::rng_from_seed(seed);
        let x = DMatrix::from_fn(12, 2, |i, j| (i * 3 + j) as f64 * 0.1 - 1.0);
        let spec = MlpSpec {
            layers: vec![Layer { weights: vec![vec![1.0, -0.5]], bias: vec![0.1], activation: Activation::Tanh }],
            output: MlpOutput::Scalar,
        };
        let model = ModelHandle::mlp(spec).unwrap();
        let specs = || vec![FeatureSpec::continuous("a"), FeatureSpec::continuous("b")];
        let base = build_observational_table(&model, &x, specs()).unwrap();
        let mut perm: Vec<usize> = (0..12).collect();
        perm.shuffle(&mut rng);
        let permuted = build_observational_table(&model, &x.select_rows(&perm), specs()).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(permuted.outcome()[k], base.outcome()[i]);
        }
    }
}

#[test]
fn subprocess_table_is_aligned_after_permutation() {
    let x = DMatrix::from_fn(6, 1, |i, _| i as f64);
    let model = ModelHandle::subprocess(AFFINE, TIMEOUT);
    let perm = [3, 0, 5, 1, 4, 2];
    let d = build_observational_table(&model, &x.select_rows(&perm), vec![FeatureSpec::continuous("x")]).unwrap();
    let expected: Vec<f64> = perm.iter().map(|&i| 2.0 * i as f64 + 1.0).collect();
    assert_eq!(d.outcome(), expected);
}
