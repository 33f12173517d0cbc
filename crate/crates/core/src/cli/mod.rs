//! Command-line front end.
//!
//! Exit codes: 0 success, 1 invariant failure, 2 input error, 3 solver
//! failure. Results go to stdout (or `--out`) as JSON with every float
//! written to 17 significant digits, so reruns are byte-identical.

pub mod suites;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::error::{invalid, Error, Result};
use crate::estimators::{estimate, EstimatorConfig, OptimizerConfig, PenaltyMeasure, SampleSet};
use crate::extended::ExtReal;
use crate::functionals::{FeatureMap, FunctionClassSpec, PenaltySpec, Sidedness};
use crate::generators::ConvexGenerator;
use crate::measures::{DiscreteMeasure, MetricSpec, StochasticKernel};
use crate::solvers::{
    data_processing_check, dirac_example, dirac_measures, f_divergence, f_gamma_divergence_with, gamma_ipm,
    infimal_convolution_with, limit_scan, SolverOptions,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVARIANT: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "fgamma", version, about = "(f,Γ)-divergences on finite spaces and from samples")]
pub struct Cli {
    /// Flat JSON config; keys are long flag names, flags given on the
    /// command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Write the JSON result here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Exact divergences between two measure files.
    Divergence(DivergenceArgs),
    /// Sweep the three-point Dirac example; CSV plus a plot script.
    DiracFigure(DiracArgs),
    /// Penalized sample-based estimate.
    Estimate(EstimateArgs),
    /// Randomized invariant suite.
    Proptest(ProptestArgs),
    /// Scan the Lipschitz constant towards both limits.
    Limits(LimitsArgs),
    /// Data-processing inequality under a stochastic kernel.
    Dpi(DpiArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ProblemArgs {
    /// Measure Q (JSON or CSV).
    #[arg(long)]
    pub q: Option<PathBuf>,
    /// Measure P (JSON or CSV).
    #[arg(long)]
    pub p: Option<PathBuf>,
    /// Generator: kl, alpha:<v>, chi2.
    #[arg(long = "f")]
    pub generator: Option<String>,
    /// Function class: lipschitz, bounded, lipschitz-bounded.
    #[arg(long)]
    pub gamma: Option<String>,
    #[arg(long)]
    pub lip: Option<f64>,
    #[arg(long)]
    pub bound: Option<f64>,
    /// Explicit metric (JSON, `{"kind":"explicit","points":..,"matrix":..}`).
    #[arg(long)]
    pub metric: Option<PathBuf>,
    /// Values above this are reported as infinite.
    #[arg(long)]
    pub ceiling: Option<f64>,
    /// Duality-gap tolerance of the barrier solver.
    #[arg(long)]
    pub gap_tol: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DivergenceArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// fdiv, ipm, fgamma, infconv or all.
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Debug, Args)]
pub struct DiracArgs {
    #[arg(long)]
    pub x2_min: Option<f64>,
    #[arg(long)]
    pub x2_max: Option<f64>,
    #[arg(long)]
    pub x2_steps: Option<usize>,
    /// Comma-separated ratios x3 / x2.
    #[arg(long)]
    pub x3_ratios: Option<String>,
    /// Comma-separated α values.
    #[arg(long)]
    pub alphas: Option<String>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub plot_script: Option<PathBuf>,
    /// Skip the generic-solver cross-check column.
    #[arg(long)]
    pub no_cross_check: bool,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Samples from Q (CSV, one row per sample).
    #[arg(long)]
    pub q_samples: Option<PathBuf>,
    #[arg(long)]
    pub p_samples: Option<PathBuf>,
    #[arg(long = "f")]
    pub generator: Option<String>,
    /// rff, poly or grid.
    #[arg(long)]
    pub features: Option<String>,
    #[arg(long)]
    pub n_features: Option<usize>,
    /// Random Fourier bandwidth; median pairwise distance by default.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    #[arg(long)]
    pub degree: Option<u32>,
    /// none, one or two.
    #[arg(long)]
    pub penalty: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lip: Option<f64>,
    #[arg(long)]
    pub interp_n: Option<usize>,
    /// interpolation or pairs.
    #[arg(long)]
    pub penalty_measure: Option<String>,
    /// Fix ν (KL: log-mean-exp form).
    #[arg(long)]
    pub no_shift: bool,
    #[arg(long)]
    pub param_bound: Option<f64>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub ceiling: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Objective trace CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProptestArgs {
    #[arg(long)]
    pub suite: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct LimitsArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Comma-separated Lipschitz constants.
    #[arg(long)]
    pub scales: Option<String>,
}

#[derive(Debug, Args)]
pub struct DpiArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Kernel JSON (`matrix`, `targets`, optional `sources`).
    #[arg(long)]
    pub kernel: Option<PathBuf>,
}

/// Flat JSON config: scalar values (or arrays of scalars) keyed by flag name.
#[derive(Debug, Default, Clone)]
pub struct ExperimentConfig {
    values: Map<String, Value>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let Value::Object(values) = serde_json::from_str(s)? else {
            return invalid("config must be a JSON object");
        };
        for (k, v) in &values {
            let flat = match v {
                Value::Object(_) => false,
                Value::Array(xs) => xs.iter().all(|x| !x.is_object() && !x.is_array()),
                _ => true,
            };
            if !flat {
                return invalid(format!("config key {k:?} must hold a scalar or a list of scalars"));
            }
        }
        Ok(ExperimentConfig { values })
    }

    /// The value as CLI text; lists become comma-separated.
    fn text(&self, key: &str) -> Option<String> {
        fn scalar(v: &Value) -> String {
            match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            }
        }
        match self.values.get(key)? {
            Value::Null => None,
            Value::Array(xs) => Some(xs.iter().map(scalar).collect::<Vec<_>>().join(",")),
            v => Some(scalar(v)),
        }
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.text(key) {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| Error::InvalidInput(format!("config key {key:?}: cannot parse {s:?}"))),
        }
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.values.get(key) {
            None | Some(Value::Null) => Ok(false),
            Some(Value::Bool(b)) => Ok(*b),
            Some(_) => invalid(format!("config key {key:?} must be a boolean")),
        }
    }

    fn check_keys(&self, known: &[&str]) -> Result<()> {
        for k in self.values.keys() {
            if !known.contains(&k.as_str()) {
                return invalid(format!("unknown config key {k:?}"));
            }
        }
        Ok(())
    }
}

/// Flag value, else config value, else `None`.
fn resolve<T: FromStr + Clone>(flag: &Option<T>, cfg: &ExperimentConfig, key: &str) -> Result<Option<T>> {
    match flag {
        Some(v) => Ok(Some(v.clone())),
        None => cfg.get(key),
    }
}

fn require<T>(v: Option<T>, key: &str) -> Result<T> {
    v.ok_or_else(|| Error::InvalidInput(format!("missing --{key}")))
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("bad number {t:?} in list")))
        })
        .collect()
}

/// JSON text with floats as `{:.16e}` and non-finite values as strings.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    fn write(v: &Value, out: &mut String) {
        match v {
            Value::Number(n) if n.is_f64() => {
                let x = n.as_f64().unwrap_or(f64::NAN);
                out.push_str(&format!("{x:.16e}"));
            }
            Value::Array(xs) => {
                out.push('[');
                for (i, x) in xs.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write(x, out);
                }
                out.push(']');
            }
            Value::Object(m) => {
                out.push('{');
                for (i, (k, x)) in m.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&Value::String(k.clone()).to_string());
                    out.push(':');
                    write(x, out);
                }
                out.push('}');
            }
            other => out.push_str(&other.to_string()),
        }
    }
    let mut out = String::new();
    write(&serde_json::to_value(value)?, &mut out);
    Ok(out)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonConvergence(_) | Error::Divergence { .. } => EXIT_SOLVER,
        _ => EXIT_INPUT,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::DimensionMismatch { .. } => "dimension-mismatch",
        Error::InvalidInput(_) => "invalid-input",
        Error::Infeasible(_) => "infeasible",
        Error::NonConvergence(_) => "non-convergence",
        Error::Divergence { .. } => "divergence",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::Csv(_) => "csv",
    }
}

/// A finished command: JSON payload and exit code.
struct Output {
    json: Value,
    code: i32,
}

impl Output {
    fn ok(json: Value) -> Self {
        Output { json, code: EXIT_OK }
    }

    fn checked(json: Value, holds: bool) -> Self {
        Output {
            json,
            code: if holds { EXIT_OK } else { EXIT_INVARIANT },
        }
    }
}

fn init_threads() {
    if let Some(n) = std::env::var("FGAMMA_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // Fails only if the pool is already built, in which case it stays.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                stdout.write_all(text.as_bytes())
            } else {
                stderr.write_all(text.as_bytes())
            };
            return code;
        }
    };
    init_threads();
    match execute(&cli).and_then(|o| {
        let text = to_json_string(&o.json)? + "\n";
        match &cli.out {
            Some(path) => std::fs::write(path, &text)?,
            None => stdout.write_all(text.as_bytes())?,
        }
        Ok(o.code)
    }) {
        Ok(code) => code,
        Err(e) => {
            let report = json!({ "error": error_kind(&e), "message": e.to_string() });
            let _ = writeln!(stderr, "{report}");
            exit_code(&e)
        }
    }
}

fn execute(cli: &Cli) -> Result<Output> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    match &cli.command {
        Command::Divergence(a) => cmd_divergence(a, &cfg),
        Command::DiracFigure(a) => cmd_dirac_figure(a, &cfg),
        Command::Estimate(a) => cmd_estimate(a, &cfg),
        Command::Proptest(a) => cmd_proptest(a, &cfg),
        Command::Limits(a) => cmd_limits(a, &cfg),
        Command::Dpi(a) => cmd_dpi(a, &cfg),
    }
}

const PROBLEM_KEYS: [&str; 10] = ["q", "p", "f", "gamma", "lip", "bound", "metric", "ceiling", "gap-tol", "seed"];

struct Problem {
    q: DiscreteMeasure,
    p: DiscreteMeasure,
    f: ConvexGenerator,
    gamma: FunctionClassSpec,
    opts: SolverOptions,
}

fn load_problem(a: &ProblemArgs, cfg: &ExperimentConfig) -> Result<Problem> {
    let q = DiscreteMeasure::load(&require(resolve(&a.q, cfg, "q")?, "q")?)?;
    let p = DiscreteMeasure::load(&require(resolve(&a.p, cfg, "p")?, "p")?)?;
    let f: ConvexGenerator = resolve(&a.generator, cfg, "f")?.unwrap_or_else(|| "kl".into()).parse()?;
    let lip = resolve(&a.lip, cfg, "lip")?.unwrap_or(1.0);
    let bound = resolve(&a.bound, cfg, "bound")?;
    let metric = match resolve(&a.metric, cfg, "metric")? {
        Some(path) => {
            let m: MetricSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            if let MetricSpec::Explicit { points, matrix } = m {
                MetricSpec::explicit(points, matrix)?
            } else {
                m
            }
        }
        None => MetricSpec::Euclidean,
    };
    let kind = resolve(&a.gamma, cfg, "gamma")?.unwrap_or_else(|| "lipschitz".into());
    let gamma = match kind.as_str() {
        "lipschitz" | "lip" => FunctionClassSpec::Lipschitz { lip, metric, bound: None },
        "lipschitz-bounded" => FunctionClassSpec::Lipschitz {
            lip,
            metric,
            bound: Some(require(bound, "bound")?),
        },
        "bounded" => FunctionClassSpec::AllBounded {
            bound: require(bound, "bound")?,
        },
        other => return invalid(format!("unknown function class {other:?}")),
    };
    gamma.validate()?;
    let mut opts = SolverOptions::default();
    if let Some(c) = resolve(&a.ceiling, cfg, "ceiling")? {
        if !(c > 0.0) {
            return invalid("ceiling must be positive");
        }
        opts.ceiling = c;
    }
    if let Some(t) = resolve(&a.gap_tol, cfg, "gap-tol")? {
        if !(t > 0.0) {
            return invalid("gap tolerance must be positive");
        }
        opts.barrier.gap_tol = t;
    }
    Ok(Problem { q, p, f, gamma, opts })
}

fn cmd_divergence(a: &DivergenceArgs, cfg: &ExperimentConfig) -> Result<Output> {
    let mut keys = PROBLEM_KEYS.to_vec();
    keys.push("mode");
    cfg.check_keys(&keys)?;
    let pr = load_problem(&a.problem, cfg)?;
    let mode = resolve(&a.mode, cfg, "mode")?.unwrap_or_else(|| "fgamma".into());
    let value = |v: ExtReal| json!({ "value": v });
    Ok(match mode.as_str() {
        "fdiv" => Output::ok(value(f_divergence(&pr.q, &pr.p, &pr.f)?)),
        "ipm" => Output::ok(serde_json::to_value(gamma_ipm(&pr.q, &pr.p, &pr.gamma)?)?),
        "fgamma" => Output::ok(serde_json::to_value(f_gamma_divergence_with(
            &pr.q, &pr.p, &pr.f, &pr.gamma, &pr.opts,
        )?)?),
        "infconv" => Output::ok(serde_json::to_value(infimal_convolution_with(
            &pr.q, &pr.p, &pr.f, &pr.gamma, &pr.opts,
        )?)?),
        "all" => {
            let df = f_divergence(&pr.q, &pr.p, &pr.f)?;
            let ipm = gamma_ipm(&pr.q, &pr.p, &pr.gamma)?.value;
            let dfg = f_gamma_divergence_with(&pr.q, &pr.p, &pr.f, &pr.gamma, &pr.opts)?;
            let holds = dfg.value.to_f64() <= df.min(ipm).to_f64() + 1e-8;
            Output::checked(
                json!({ "df": df, "ipm": ipm, "dfgamma": dfg.value, "sandwich_holds": holds, "fgamma": dfg }),
                holds,
            )
        }
        other => return invalid(format!("unknown mode {other:?}; expected fdiv, ipm, fgamma, infconv, all")),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DiracRow {
    pub alpha: f64,
    pub x2: f64,
    pub x3: f64,
    pub eta_x2_mass: Option<f64>,
    pub value: Option<f64>,
    pub regime: Option<String>,
    pub infconv_value: Option<f64>,
    pub error: Option<String>,
}

fn dirac_row(alpha: f64, x2: f64, x3: f64, cross_check: bool) -> DiracRow {
    let mut row = DiracRow {
        alpha,
        x2,
        x3,
        eta_x2_mass: None,
        value: None,
        regime: None,
        infconv_value: None,
        error: None,
    };
    let res = (|| -> Result<()> {
        let s = dirac_example(x2, x3, alpha)?;
        row.eta_x2_mass = Some(s.eta_x2_mass);
        row.value = Some(s.divergence_value);
        row.regime = Some(format!("{:?}", s.regime));
        if cross_check {
            let (q, p) = dirac_measures(x2, x3)?;
            let f = crate::generators::make_alpha(alpha)?;
            let ic = crate::solvers::infimal_convolution(&q, &p, &f, &FunctionClassSpec::lipschitz(1.0)?)?;
            row.infconv_value = Some(ic.value.to_f64());
        }
        Ok(())
    })();
    if let Err(e) = res {
        row.error = Some(e.to_string());
    }
    row
}

/// Rows of the Dirac sweep, ordered by (α, ratio, x₂).
pub fn dirac_sweep(alphas: &[f64], ratios: &[f64], x2s: &[f64], cross_check: bool) -> Vec<DiracRow> {
    let mut grid = Vec::new();
    for &a in alphas {
        for &r in ratios {
            for &x in x2s {
                grid.push((a, r, x));
            }
        }
    }
    grid.par_iter()
        .map(|&(a, r, x)| dirac_row(a, x, r * x, cross_check))
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

const PLOT_SCRIPT: &str = r#"import csv, sys
from collections import defaultdict
import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "__CSV__"
series = defaultdict(list)
with open(path) as fh:
    for row in csv.DictReader(fh):
        if row["eta_x2_mass"]:
            key = (float(row["alpha"]), float(row["x3"]) / float(row["x2"]))
            series[key].append((float(row["x2"]), float(row["eta_x2_mass"]), float(row["value"])))

fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4))
for (alpha, ratio), pts in sorted(series.items()):
    pts.sort()
    xs = [p[0] for p in pts]
    label = f"alpha={alpha:g}, x3/x2={ratio:g}"
    left.plot(xs, [p[1] for p in pts], label=label)
    right.plot(xs, [p[2] for p in pts], label=label)
left.axhline(2 / 3, color="grey", linestyle=":")
left.set_xlabel("x2")
left.set_ylabel("eta*(x2)")
right.set_xlabel("x2")
right.set_ylabel("divergence")
left.legend()
fig.tight_layout()
fig.savefig(path.rsplit(".", 1)[0] + ".png", dpi=150)
"#;

fn cmd_dirac_figure(a: &DiracArgs, cfg: &ExperimentConfig) -> Result<Output> {
    cfg.check_keys(&[
        "x2-min",
        "x2-max",
        "x2-steps",
        "x3-ratios",
        "alphas",
        "csv",
        "plot-script",
        "no-cross-check",
        "seed",
    ])?;
    let lo = resolve(&a.x2_min, cfg, "x2-min")?.unwrap_or(0.05);
    let hi = resolve(&a.x2_max, cfg, "x2-max")?.unwrap_or(3.0);
    let steps = resolve(&a.x2_steps, cfg, "x2-steps")?.unwrap_or(60);
    let ratios = parse_list(&resolve(&a.x3_ratios, cfg, "x3-ratios")?.unwrap_or_else(|| "2".into()))?;
    let alphas = parse_list(&resolve(&a.alphas, cfg, "alphas")?.unwrap_or_else(|| "1.5,2,5".into()))?;
    let csv_path = resolve(&a.csv, cfg, "csv")?.unwrap_or_else(|| PathBuf::from("dirac_figure.csv"));
    let script = resolve(&a.plot_script, cfg, "plot-script")?.unwrap_or_else(|| csv_path.with_extension("py"));
    let cross = !(a.no_cross_check || cfg.flag("no-cross-check")?);
    if steps == 0 || !(lo > 0.0 && hi >= lo) {
        return invalid("need 0 < x2-min ≤ x2-max and at least one step");
    }
    if ratios.is_empty() || ratios.iter().any(|r| !(*r > 1.0)) {
        return invalid("x3 ratios must exceed 1");
    }
    let x2s: Vec<f64> = if steps == 1 {
        vec![lo]
    } else {
        (0..steps).map(|k| lo + (hi - lo) * k as f64 / (steps - 1) as f64).collect()
    };
    let rows = dirac_sweep(&alphas, &ratios, &x2s, cross);

    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["alpha", "x2", "x3", "eta_x2_mass", "value", "regime", "infconv_value", "error"])?;
    for r in &rows {
        w.write_record([
            format!("{:.16e}", r.alpha),
            format!("{:.16e}", r.x2),
            format!("{:.16e}", r.x3),
            fmt_opt(r.eta_x2_mass),
            fmt_opt(r.value),
            r.regime.clone().unwrap_or_default(),
            fmt_opt(r.infconv_value),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    std::fs::write(&script, PLOT_SCRIPT.replace("__CSV__", &csv_path.display().to_string()))?;

    // Per series: masses in [1/3, 2/3] and nondecreasing in x₂.
    let mut in_range = true;
    let mut monotone = true;
    for series in rows.chunks(x2s.len()) {
        let masses: Vec<f64> = series.iter().filter_map(|r| r.eta_x2_mass).collect();
        in_range &= masses.iter().all(|m| *m >= 1.0 / 3.0 - 1e-9 && *m <= 2.0 / 3.0 + 1e-9);
        monotone &= masses.windows(2).all(|w| w[1] >= w[0] - 1e-9);
    }
    let cross_diff = rows
        .iter()
        .filter_map(|r| Some((r.value? - r.infconv_value?).abs()))
        .fold(0.0, f64::max);
    let failures = rows.iter().filter(|r| r.error.is_some()).count();
    let holds = in_range && monotone && (!cross || cross_diff <= 1e-5);
    Ok(Output::checked(
        json!({
            "rows": rows.len(),
            "failed_rows": failures,
            "mass_in_range": in_range,
            "mass_nondecreasing": monotone,
            "max_cross_check_difference": if cross { Some(cross_diff) } else { None },
            "csv": csv_path.display().to_string(),
            "plot_script": script.display().to_string(),
        }),
        holds,
    ))
}

fn cmd_estimate(a: &EstimateArgs, cfg: &ExperimentConfig) -> Result<Output> {
    cfg.check_keys(&[
        "q-samples",
        "p-samples",
        "f",
        "features",
        "n-features",
        "bandwidth",
        "degree",
        "penalty",
        "lambda",
        "lip",
        "interp-n",
        "penalty-measure",
        "no-shift",
        "param-bound",
        "step",
        "max-iter",
        "tol",
        "ceiling",
        "seed",
        "trace",
    ])?;
    let q = SampleSet::load(&require(resolve(&a.q_samples, cfg, "q-samples")?, "q-samples")?)?;
    let p = SampleSet::load(&require(resolve(&a.p_samples, cfg, "p-samples")?, "p-samples")?)?;
    if q.dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: q.dim(),
            found: p.dim(),
        });
    }
    let seed = resolve(&a.seed, cfg, "seed")?.unwrap_or(0);
    let f: ConvexGenerator = resolve(&a.generator, cfg, "f")?.unwrap_or_else(|| "kl".into()).parse()?;
    let kind = resolve(&a.features, cfg, "features")?.unwrap_or_else(|| "rff".into());
    let features = match kind.as_str() {
        "rff" => {
            let m = resolve(&a.n_features, cfg, "n-features")?.unwrap_or(128);
            match resolve(&a.bandwidth, cfg, "bandwidth")? {
                Some(b) => FeatureMap::random_fourier(q.dim(), m, b, seed)?,
                None if m == 128 => EstimatorConfig::default_features(&q, &p, seed)?,
                None => {
                    let pooled: Vec<Vec<f64>> = q.rows().iter().chain(p.rows()).cloned().collect();
                    FeatureMap::random_fourier(q.dim(), m, crate::estimators::median_bandwidth(&pooled), seed)?
                }
            }
        }
        "poly" => FeatureMap::polynomial(q.dim(), resolve(&a.degree, cfg, "degree")?.unwrap_or(3))?,
        "grid" => {
            let mut pts: Vec<Vec<f64>> = q.rows().iter().chain(p.rows()).cloned().collect();
            pts.sort_by(|x, y| x.iter().zip(y).map(|(u, v)| u.total_cmp(v)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
            pts.dedup();
            FeatureMap::grid(pts)?
        }
        other => return invalid(format!("unknown features {other:?}; expected rff, poly, grid")),
    };
    let mut config = EstimatorConfig::new(f, features);
    config.seed = seed;
    config.use_shift = !(a.no_shift || cfg.flag("no-shift")?);
    config.param_bound = resolve(&a.param_bound, cfg, "param-bound")?;
    let defaults = OptimizerConfig::default();
    config.optimizer = OptimizerConfig {
        step: resolve(&a.step, cfg, "step")?.unwrap_or(defaults.step),
        max_iter: resolve(&a.max_iter, cfg, "max-iter")?.unwrap_or(defaults.max_iter),
        tol: resolve(&a.tol, cfg, "tol")?.unwrap_or(defaults.tol),
    };
    if let Some(c) = resolve(&a.ceiling, cfg, "ceiling")? {
        config.ceiling = c;
    }
    let penalty = resolve(&a.penalty, cfg, "penalty")?.unwrap_or_else(|| "none".into());
    if penalty != "none" {
        let side: Sidedness = penalty.parse()?;
        config.penalty = Some(PenaltySpec::new(
            resolve(&a.lambda, cfg, "lambda")?.unwrap_or(1.0),
            resolve(&a.lip, cfg, "lip")?.unwrap_or(1.0),
            side,
            resolve(&a.interp_n, cfg, "interp-n")?.unwrap_or(1000),
        )?);
    }
    config.penalty_measure = match resolve(&a.penalty_measure, cfg, "penalty-measure")?.as_deref() {
        None | Some("interpolation") => PenaltyMeasure::Interpolation,
        Some("pairs") => PenaltyMeasure::SamplePairs,
        Some(other) => return invalid(format!("unknown penalty measure {other:?}")),
    };

    let r = estimate(&q, &p, &config)?;
    let trace_path = resolve(&a.trace, cfg, "trace")?.unwrap_or_else(|| PathBuf::from("estimate_trace.csv"));
    let mut w = csv::Writer::from_path(&trace_path)?;
    w.write_record(["iteration", "objective"])?;
    for (i, v) in r.trace.iter().enumerate() {
        w.write_record([i.to_string(), format!("{v:.16e}")])?;
    }
    w.flush()?;
    Ok(Output::ok(json!({
        "value": r.value,
        "objective": r.objective,
        "penalty": r.penalty,
        "nu": r.nu,
        "theta": r.theta,
        "iterations": r.iterations,
        "converged": r.converged,
        "trace": trace_path.display().to_string(),
    })))
}

fn cmd_proptest(a: &ProptestArgs, cfg: &ExperimentConfig) -> Result<Output> {
    cfg.check_keys(&["suite", "n", "seed"])?;
    let suite = require(resolve(&a.suite, cfg, "suite")?, "suite")?;
    let n = resolve(&a.n, cfg, "n")?.unwrap_or(100);
    let seed = resolve(&a.seed, cfg, "seed")?.unwrap_or(0);
    let report = suites::run_suite(&suite, n, seed)?;
    let ok = report.all_passed();
    Ok(Output::checked(serde_json::to_value(report)?, ok))
}

fn cmd_limits(a: &LimitsArgs, cfg: &ExperimentConfig) -> Result<Output> {
    let mut keys = PROBLEM_KEYS.to_vec();
    keys.push("scales");
    cfg.check_keys(&keys)?;
    let pr = load_problem(&a.problem, cfg)?;
    let mut scales = parse_list(
        &resolve(&a.scales, cfg, "scales")?.unwrap_or_else(|| "1e-4,1e-3,1e-2,1e-1,1,10,100,1000,10000".into()),
    )?;
    if scales.iter().any(|s| !(*s > 0.0)) {
        return invalid("scales must be positive");
    }
    scales.sort_by(f64::total_cmp);
    let scan = limit_scan(&pr.q, &pr.p, &pr.f, &pr.gamma, &scales)?;
    let df = f_divergence(&pr.q, &pr.p, &pr.f)?;
    let ipm = gamma_ipm(&pr.q, &pr.p, &pr.gamma)?.value;
    let values: Vec<f64> = scan.iter().map(|(_, v)| v.to_f64()).collect();
    let ratios: Vec<f64> = scan.iter().map(|(s, v)| v.to_f64() / s).collect();
    // D^{Γ_L} grows with L while D^{Γ_L}/L shrinks.
    let increasing = values.windows(2).all(|w| w[1] >= w[0] - 1e-9);
    let ratio_decreasing = ratios.windows(2).all(|w| w[1] <= w[0] + 1e-6 * w[0].abs().max(1.0));
    let entries: Vec<Value> = scan
        .iter()
        .zip(&ratios)
        .map(|((s, v), r)| json!({ "lip": s, "value": v, "value_over_lip": r }))
        .collect();
    Ok(Output::checked(
        json!({
            "scan": entries,
            "f_divergence": df,
            "ipm": ipm,
            "value_increasing": increasing,
            "ratio_decreasing": ratio_decreasing,
        }),
        increasing && ratio_decreasing,
    ))
}

fn cmd_dpi(a: &DpiArgs, cfg: &ExperimentConfig) -> Result<Output> {
    let mut keys = PROBLEM_KEYS.to_vec();
    keys.push("kernel");
    cfg.check_keys(&keys)?;
    let pr = load_problem(&a.problem, cfg)?;
    let k = StochasticKernel::load(&require(resolve(&a.kernel, cfg, "kernel")?, "kernel")?)?;
    let r = data_processing_check(&pr.q, &pr.p, &pr.f, &pr.gamma, &k)?;
    Ok(Output::checked(serde_json::to_value(&r)?, r.holds))
}
