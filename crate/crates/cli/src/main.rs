use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use causal_probe::attribution::{agreement, attribute_all, contrastive_explain, render_markdown};
use causal_probe::blackbox::ModelHandle;
use causal_probe::config::RunConfig;
use causal_probe::data::{AttributionReport, Dataset, Estimator, FeatureKind, Table};
use causal_probe::effect::Inference;
use causal_probe::synth::{gen_linear_scm, gen_synthetic, synth_feature_names, LinearScmConfig, SynthConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

const WORKERS_ENV: &str = "CAUSAL_PROBE_WORKERS";

/// Exit code for usage and input errors.
const EXIT_INPUT: u8 = 2;
/// Exit code when some estimator failed on some feature.
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "causal-probe", version, about = "Causal attribution of black-box model outputs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark dataset.
    Simulate(SimulateArgs),
    /// Run a model over an inputs CSV and append its outputs.
    Probe(ProbeArgs),
    /// Estimate per-feature causal effects and attributions.
    Attribute(AttributeArgs),
    /// Explain why two samples get different outputs.
    Explain(ExplainArgs),
    /// Cross-estimator agreement of saved reports.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SimKind {
    /// Two-class benchmark: f1..f3 carry the class, f4..f12 are noise.
    Synthetic,
    /// Confounded linear structural model with a known effect.
    LinearScm,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    kind: SimKind,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Spread of the synthetic clusters.
    #[arg(long, default_value_t = 0.2)]
    sd: f64,
    /// Confounding strength of the linear model.
    #[arg(long, default_value_t = 0.8)]
    gamma: f64,
    /// True effect of the linear model.
    #[arg(long, default_value_t = 2.0)]
    beta: f64,
}

#[derive(Args)]
struct ModelArgs {
    /// MLP spec JSON, or `cmd:<shell command>` for a subprocess model.
    #[arg(long)]
    model: Option<String>,
    /// Report hard 0/1 labels instead of class probabilities.
    #[arg(long)]
    hard_labels: bool,
    /// Subprocess timeout in seconds for a whole batch.
    #[arg(long, default_value_t = 300)]
    timeout: u64,
}

impl ModelArgs {
    fn handle(&self) -> Result<Option<ModelHandle>, String> {
        let Some(reference) = &self.model else { return Ok(None) };
        let model = ModelHandle::from_reference(reference, Duration::from_secs(self.timeout))
            .map_err(|e| format!("loading model `{reference}`: {e}"))?;
        Ok(Some(model.with_hard_labels(self.hard_labels)))
    }
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    inputs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Columns of the inputs CSV that are not model inputs.
    #[arg(long, value_delimiter = ',')]
    drop: Vec<String>,
    /// Name of the appended output column.
    #[arg(long, default_value = "y")]
    output_column: String,
}

#[derive(Args)]
struct AttributeArgs {
    /// CSV of features plus the outcome column (or model inputs with `--model`).
    #[arg(long)]
    data: PathBuf,
    /// Outcome column; with `--model` the name given to the probed output.
    #[arg(long)]
    outcome: Option<String>,
    #[command(flatten)]
    model: ModelArgs,
    /// Columns to ignore.
    #[arg(long, value_delimiter = ',')]
    drop: Vec<String>,
    /// Treat these features as binary.
    #[arg(long, value_delimiter = ',')]
    binary: Vec<String>,
    /// Treat these features as continuous even if they only take 0/1.
    #[arg(long, value_delimiter = ',')]
    continuous: Vec<String>,
    /// JSON config with dotted keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    inference: Option<InferenceArg>,
    #[arg(long)]
    bootstrap_reps: Option<usize>,
    /// Trim percentile for density-ratio weights.
    #[arg(long)]
    trim: Option<f64>,
    #[arg(long)]
    optweight_delta: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pswgbm_grid: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores); overrides CAUSAL_PROBE_WORKERS.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory for report.json and report.md.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum InferenceArg {
    Sandwich,
    Bootstrap,
}

#[derive(Args)]
struct ExplainArgs {
    /// Report JSON written by `attribute`.
    #[arg(long)]
    report: PathBuf,
    /// Estimator whose attributions to use (default: first in the report).
    #[arg(long)]
    estimator: Option<String>,
    /// CSV holding the two samples; columns are matched by feature name.
    #[arg(long, requires = "rows", conflicts_with_all = ["a", "b"])]
    data: Option<PathBuf>,
    /// Zero-based row indices `a,b` into `--data`.
    #[arg(long, value_delimiter = ',', num_args = 1, requires = "data")]
    rows: Option<Vec<usize>>,
    /// Sample a as comma-separated values in feature order.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, requires = "b")]
    a: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, requires = "a")]
    b: Option<Vec<f64>>,
    /// Write the explanation JSON here and the text next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON files (each holding one report or a list).
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<String> for Failure {
    fn from(message: String) -> Self {
        Self { code: EXIT_INPUT, message }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Probe(a) => probe(a),
        Command::Attribute(a) => attribute(a),
        Command::Explain(a) => explain(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn ctx<E: std::fmt::Display>(what: impl std::fmt::Display) -> impl FnOnce(E) -> String {
    move |e| format!("{what}: {e}")
}

fn write_file(path: &Path, contents: &str) -> Result<(), String> {
    std::fs::write(path, contents).map_err(ctx(format!("writing {}", path.display())))
}

fn read_table(path: &Path) -> Result<Table, String> {
    Table::read(path).map_err(ctx(format!("reading {}", path.display())))
}

fn simulate(a: SimulateArgs) -> Result<(), Failure> {
    let n = a.n as usize;
    match a.kind {
        SimKind::Synthetic => {
            let cfg = SynthConfig { n, seed: a.seed, sd: a.sd, ..Default::default() };
            let (x, labels) = gen_synthetic(&cfg).map_err(|e| e.to_string())?;
            let mut headers = synth_feature_names();
            headers.push("label".into());
            let k = x.ncols();
            let mut values = x.insert_column(k, 0.0);
            values.column_mut(headers.len() - 1).copy_from_slice(&labels);
            Table { headers, values }.write(&a.out).map_err(ctx(format!("writing {}", a.out.display())))?;
        }
        SimKind::LinearScm => {
            let cfg = LinearScmConfig { n, seed: a.seed, gamma: a.gamma, beta: a.beta, ..Default::default() };
            let s = gen_linear_scm(&cfg).map_err(|e| e.to_string())?;
            let d = &s.dataset;
            let mut values = d.features().clone().insert_column(d.n_features(), 0.0);
            values.column_mut(d.n_features()).copy_from_slice(d.outcome());
            let mut headers = d.feature_names();
            headers.push("Y".into());
            Table { headers, values }.write(&a.out).map_err(ctx(format!("writing {}", a.out.display())))?;
            let truth = serde_json::to_string_pretty(&s.truth).map_err(|e| e.to_string())?;
            write_file(&a.out.with_extension("truth.json"), &(truth + "\n"))?;
        }
    }
    Ok(())
}

fn probe(a: ProbeArgs) -> Result<(), Failure> {
    let model = a.model.handle()?.ok_or_else(|| "--model is required".to_string())?;
    let table = read_table(&a.inputs)?;
    let inputs = table.without(&a.drop).map_err(|e| e.to_string())?;
    let y = model.predict_batch(&inputs.values).map_err(ctx("probing model"))?;
    let mut headers = inputs.headers.clone();
    headers.push(a.output_column);
    let k = inputs.values.ncols();
    let mut values = inputs.values.insert_column(k, 0.0);
    values.column_mut(k).copy_from_slice(&y);
    Table { headers, values }.write(&a.out).map_err(ctx(format!("writing {}", a.out.display())))?;
    Ok(())
}

fn run_config(a: &AttributeArgs) -> Result<RunConfig, String> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p).map_err(ctx(format!("config {}", p.display())))?,
        None => RunConfig::default(),
    };
    if let Some(list) = &a.estimators {
        cfg.estimators = list
            .iter()
            .map(|s| s.trim().parse::<Estimator>())
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.inference {
        cfg.inference = match v {
            InferenceArg::Sandwich => Inference::Sandwich,
            InferenceArg::Bootstrap => Inference::Bootstrap,
        };
    }
    if let Some(v) = a.bootstrap_reps {
        cfg.bootstrap_reps = v;
    }
    if a.trim.is_some() {
        cfg.trim_percentile = a.trim;
    }
    if let Some(v) = a.optweight_delta {
        cfg.optweight_delta = v;
    }
    if let Some(v) = &a.pswgbm_grid {
        cfg.pswgbm_grid = v.clone();
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        cfg.workers = v.trim().parse().map_err(|_| format!("{WORKERS_ENV} must be a count, got `{v}`"))?;
    }
    if let Some(v) = a.workers {
        cfg.workers = v;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn load_dataset(a: &AttributeArgs) -> Result<Dataset, String> {
    let table = read_table(&a.data)?.without(&a.drop).map_err(|e| e.to_string())?;
    let mut d = match a.model.handle()? {
        Some(model) => {
            let outcome = a.outcome.as_deref().unwrap_or("y");
            if table.headers.iter().any(|h| h == outcome) {
                return Err(format!("inputs already contain a column named `{outcome}`; drop it or pick another --outcome"));
            }
            let y = model.predict_batch(&table.values).map_err(ctx("probing model"))?;
            Dataset::with_detected_kinds(table.values, table.headers, y).map_err(|e| e.to_string())?
        }
        None => {
            let outcome = a.outcome.as_deref().ok_or("--outcome is required without --model")?;
            table.into_dataset(outcome).map_err(|e| e.to_string())?
        }
    };
    for f in &a.binary {
        d = d.with_kind(f, FeatureKind::Binary).map_err(|e| e.to_string())?;
    }
    for f in &a.continuous {
        d = d.with_kind(f, FeatureKind::Continuous).map_err(|e| e.to_string())?;
    }
    Ok(d)
}

fn attribute(a: AttributeArgs) -> Result<(), Failure> {
    let cfg = run_config(&a)?;
    let d = load_dataset(&a)?;
    let reports = attribute_all(&d, &cfg).map_err(|e| e.to_string())?;
    let markdown = render_markdown(&reports).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(&a.out).map_err(ctx(format!("creating {}", a.out.display())))?;
    let json = serde_json::to_string_pretty(&reports).map_err(|e| e.to_string())?;
    write_file(&a.out.join("report.json"), &(json + "\n"))?;
    write_file(&a.out.join("report.md"), &markdown)?;
    print!("{markdown}");
    let failed: Vec<String> = reports
        .iter()
        .flat_map(|r| r.failures.iter().map(move |f| format!("{} on {}: {}", r.estimator, f.feature, f.error)))
        .collect();
    if failed.is_empty() {
        return Ok(());
    }
    Err(Failure { code: EXIT_PARTIAL, message: format!("some estimates failed (report written):\n  {}", failed.join("\n  ")) })
}

#[derive(serde::Deserialize)]
#[serde(untagged)]
enum ReportFile {
    Many(Vec<AttributionReport>),
    One(AttributionReport),
}

fn load_reports(path: &Path) -> Result<Vec<AttributionReport>, String> {
    let text = std::fs::read_to_string(path).map_err(ctx(format!("reading {}", path.display())))?;
    // Parsed straight into the report types: an intermediate `serde_json::Value`
    // would reorder the attribution map.
    match serde_json::from_str(&text).map_err(ctx(format!("parsing {}", path.display())))? {
        ReportFile::Many(r) => Ok(r),
        ReportFile::One(r) => Ok(vec![r]),
    }
}

fn explain(a: ExplainArgs) -> Result<(), Failure> {
    let reports = load_reports(&a.report)?;
    let report = match &a.estimator {
        Some(name) => {
            let est: Estimator = name.parse().map_err(|e: causal_probe::Error| e.to_string())?;
            reports.iter().find(|r| r.estimator == est).ok_or(format!("report has no {est} estimates"))?
        }
        None => reports.first().ok_or("report file holds no reports".to_string())?,
    };
    let (x_a, x_b) = match (&a.data, &a.rows, &a.a, &a.b) {
        (Some(path), Some(rows), _, _) => {
            let [ia, ib] = rows[..] else {
                return Err(format!("--rows takes exactly two indices, got {}", rows.len()).into());
            };
            let table = read_table(path)?;
            let cols: Vec<usize> = report
                .attributions
                .keys()
                .map(|f| table.column_index(f))
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?;
            let n = table.values.nrows();
            let row = |i: usize| -> Result<Vec<f64>, String> {
                if i >= n {
                    return Err(format!("row index {i} out of range (table has {n} rows)"));
                }
                Ok(cols.iter().map(|&c| table.values[(i, c)]).collect())
            };
            (row(ia)?, row(ib)?)
        }
        (None, None, Some(x_a), Some(x_b)) => (x_a.clone(), x_b.clone()),
        _ => return Err("give either --data with --rows, or --a and --b".to_string().into()),
    };
    let ex = contrastive_explain(report, &x_a, &x_b).map_err(|e| e.to_string())?;
    let text = ex.to_text();
    if let Some(out) = &a.out {
        let json = serde_json::to_string_pretty(&ex).map_err(|e| e.to_string())?;
        write_file(out, &(json + "\n"))?;
        write_file(&out.with_extension("txt"), &text)?;
    }
    print!("{text}");
    Ok(())
}

fn report(a: ReportArgs) -> Result<(), Failure> {
    let mut reports = Vec::new();
    for p in &a.reports {
        reports.extend(load_reports(p)?);
    }
    let matrix = agreement(&reports).map_err(|e| e.to_string())?;
    let markdown = matrix.to_markdown();
    if let Some(out) = &a.out {
        write_file(out, &markdown)?;
    }
    print!("{markdown}");
    Ok(())
}
