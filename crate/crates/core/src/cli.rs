//! Command-line front end: `synth`, `estimate`, `wls` and `compare`.
//!
//! Exit codes: 0 on success, 2 when any estimator reports a singular,
//! divergent or unanchored run (outputs are still written), 1 on usage and
//! I/O errors.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::ecf::{estimate, ChannelNoise, EcfError, EstimateStatus};
use crate::measurements::{MeasError, MeasurementDocument, MeasurementSet};
use crate::metrics::{ecf_channels, wls_channels, Method, MetricsError, MetricsReport};
use crate::netmodel::{build_ybus, parse_matpower_case, AdmittanceBlocks, NetError, Network};
use crate::synth::{
    compute_truth, synthesize_measurements, true_state_from_case, BuiltinPlan, MeasurementPlan,
    SynthError, TruthBundle, RNG_ALGORITHM,
};
use crate::wls::{estimate_wls, PolarState, WlsInit, WlsModel, WlsOptions};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    BadConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("case: {0}")]
    Net(#[from] NetError),
    #[error("measurements: {0}")]
    Meas(#[from] MeasError),
    #[error("synthesis: {0}")]
    Synth(#[from] SynthError),
    #[error("estimator: {0}")]
    Ecf(#[from] EcfError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Parser)]
#[command(
    name = "ecfse",
    version,
    about = "Circuit-based and WLS power-system state estimation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic measurement file for one seed.
    Synth(SynthArgs),
    /// Run the circuit-based QP estimator.
    Estimate(EstimateArgs),
    /// Run the polar Gauss–Newton WLS estimator.
    Wls(WlsArgs),
    /// Run several methods over a range of seeds and report metrics.
    Compare(CompareArgs),
}

#[derive(Debug, Args, Clone)]
pub struct CaseArgs {
    /// MATPOWER case file.
    #[arg(long)]
    pub case: PathBuf,
    /// Built-in plan name (rtu-all, rtu-only, fig5, pmu-all) or a plan JSON file.
    #[arg(long, default_value = "rtu-all")]
    pub plan: String,
    #[arg(long, default_value_t = 0.001)]
    pub sigma: f64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub case: CaseArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub case: CaseArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Read measurements from this file instead of synthesizing them.
    #[arg(long)]
    pub meas: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Include the per-channel table in the metrics.
    #[arg(long)]
    pub channels: bool,
}

#[derive(Debug, Args)]
pub struct WlsArgs {
    #[command(flatten)]
    pub estimate: EstimateArgs,
    #[arg(long, value_enum, default_value = "flat")]
    pub init: InitArg,
    #[arg(long, default_value_t = 20)]
    pub max_iters: usize,
    /// Halve steps (up to four times) that increase the objective.
    #[arg(long)]
    pub line_search: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub case: CaseArgs,
    /// Inclusive seed range `N..M`, or a single seed.
    #[arg(long, default_value = "1..10", value_parser = parse_seeds)]
    pub seeds: SeedRange,
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["ecf", "wls_flat", "wls_case"])]
    pub methods: Vec<MethodArg>,
    /// JSON report path; with `--format json` and no path the report goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    #[arg(long, default_value_t = 20)]
    pub max_iters: usize,
    #[arg(long)]
    pub channels: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Flat,
    Case,
}

impl From<InitArg> for WlsInit {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::Flat => WlsInit::Flat,
            InitArg::Case => WlsInit::CaseData,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    Ecf,
    #[value(name = "wls_flat")]
    WlsFlat,
    #[value(name = "wls_case")]
    WlsCase,
}

impl MethodArg {
    fn name(self) -> &'static str {
        match self {
            MethodArg::Ecf => "ecf",
            MethodArg::WlsFlat => "wls_flat",
            MethodArg::WlsCase => "wls_case",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedRange {
    pub first: u64,
    pub last: u64,
}

impl SeedRange {
    pub fn seeds(self) -> Vec<u64> {
        (self.first..=self.last).collect()
    }
}

pub fn parse_seeds(s: &str) -> Result<SeedRange, String> {
    let num = |t: &str| {
        t.trim()
            .parse::<u64>()
            .map_err(|_| format!("`{t}` is not a seed"))
    };
    let (first, last) = match s.split_once("..") {
        Some((a, b)) => (num(a)?, num(b.trim_start_matches('='))?),
        None => (num(s)?, num(s)?),
    };
    if first > last {
        return Err(format!("empty seed range {s}"));
    }
    Ok(SeedRange { first, last })
}

/// A parsed case with its admittance operators and true operating point.
pub struct Prepared {
    pub net: Network,
    pub adm: AdmittanceBlocks,
    pub truth: TruthBundle,
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let io = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(contents.as_bytes()).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn emit(out: Option<&Path>, contents: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write_atomic(p, contents),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

pub fn prepare(path: &Path) -> Result<Prepared, CliError> {
    let net = parse_matpower_case(&read_text(path)?)?;
    let adm = build_ybus(&net)?;
    let x = true_state_from_case(&net)?;
    let truth = compute_truth(&net, &adm, &x);
    Ok(Prepared { net, adm, truth })
}

pub fn resolve_plan(net: &Network, plan: &str) -> Result<MeasurementPlan, CliError> {
    match BuiltinPlan::from_name(plan) {
        Some(b) => Ok(b.expand(net)?),
        None => {
            let path = Path::new(plan);
            if !path.exists() {
                return Err(CliError::BadConfig(format!(
                    "`{plan}` is neither a built-in plan (rtu-all, rtu-only, fig5, pmu-all) nor a file"
                )));
            }
            Ok(MeasurementPlan::from_json(net, &read_text(path)?)?)
        }
    }
}

fn check_sigma(sigma: f64) -> Result<(), CliError> {
    if sigma >= 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(CliError::BadConfig(format!(
            "sigma must be a non-negative number, got {sigma}"
        )))
    }
}

fn measurement_set(p: &Prepared, args: &EstimateArgs) -> Result<MeasurementSet, CliError> {
    match &args.meas {
        Some(path) => Ok(MeasurementDocument::from_json(&read_text(path)?)?.to_set(&p.net)?),
        None => {
            check_sigma(args.case.sigma)?;
            let plan = resolve_plan(&p.net, &args.case.plan)?;
            Ok(synthesize_measurements(
                &p.net,
                &p.truth,
                &plan,
                args.case.sigma,
                args.seed,
            )?)
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

/// Outcome of one method on one measurement set.
#[derive(Clone, Debug, Serialize)]
pub struct MethodRun {
    pub method: MethodArg,
    /// `optimal`, `singular`, `anchor_missing`, `converged`, `max_iters`,
    /// `nan` or `singular_gain`.
    pub status: String,
    pub ok: bool,
    pub iterations: usize,
    pub factorizations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kkt_residual: Option<f64>,
    pub objective: f64,
    pub metrics: MetricsReport,
    /// Rectangular state estimate `[V^R; V^I]`.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub x: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub lambda: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub noise: Vec<ChannelNoise>,
}

impl MethodRun {
    fn strip_vectors(mut self) -> Self {
        self.x.clear();
        self.lambda.clear();
        self.noise.clear();
        self
    }
}

fn status_name<T: Serialize>(s: &T) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

pub fn run_method(
    p: &Prepared,
    ms: &MeasurementSet,
    method: MethodArg,
    max_iters: usize,
    line_search: bool,
    keep_channels: bool,
) -> Result<MethodRun, CliError> {
    let n = p.net.n_bus();
    let x_true = &p.truth.x_true;
    let mut run = match method {
        MethodArg::Ecf => {
            let est = estimate(&p.net, &p.adm, ms)?;
            let channels = ecf_channels(&p.net, &p.adm, ms, &est.x, x_true);
            let metrics = MetricsReport::new(Method::Ecf, channels, &est.x, x_true, n)?;
            MethodRun {
                method,
                status: status_name(&est.status),
                ok: est.status == EstimateStatus::Optimal,
                iterations: 0,
                factorizations: est.factorizations,
                kkt_residual: Some(est.kkt_residual),
                objective: est.objective,
                metrics,
                x: est.x,
                lambda: est.lambda,
                noise: est.noise,
            }
        }
        MethodArg::WlsFlat | MethodArg::WlsCase => {
            let init = if method == MethodArg::WlsFlat {
                WlsInit::Flat
            } else {
                WlsInit::CaseData
            };
            let opts = WlsOptions {
                max_iters,
                line_search,
                ..WlsOptions::default()
            };
            let res = estimate_wls(&p.net, &p.adm, ms, init, &opts);
            let model = WlsModel::new(&p.net, &p.adm, ms, opts.zi_weight_multiplier);
            let channels = wls_channels(&p.net, &model, &res.state, &PolarState::from_case(&p.net));
            let x = res.state.to_rectangular();
            let metrics = MetricsReport::new(Method::Wls, channels, &x, x_true, n)?;
            MethodRun {
                method,
                status: match res.divergence_reason {
                    None => "converged".to_string(),
                    Some(r) => status_name(&r),
                },
                ok: res.converged,
                iterations: res.iterations,
                factorizations: res.iterations,
                kkt_residual: None,
                objective: res.objective,
                metrics,
                x,
                lambda: Vec::new(),
                noise: Vec::new(),
            }
        }
    };
    if !keep_channels {
        run.metrics.channels.clear();
    }
    Ok(run)
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedBlock {
    pub seed: u64,
    pub runs: Vec<MethodRun>,
}

/// Means over the seeds on which the method succeeded.
#[derive(Clone, Debug, Serialize)]
pub struct Aggregate {
    pub method: MethodArg,
    pub seeds_ok: usize,
    pub failures: usize,
    pub mean_res: f64,
    pub mean_mse_z: f64,
    pub mean_mse_x: f64,
    pub mean_iterations: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareReport {
    pub case: String,
    pub n_bus: usize,
    pub plan: String,
    pub sigma: f64,
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodArg>,
    pub rng: &'static str,
    /// Each method is scored in its own measurement space.
    pub mse_z_space: &'static str,
    pub per_seed: Vec<SeedBlock>,
    pub aggregate: Vec<Aggregate>,
}

impl CompareReport {
    pub fn any_failure(&self) -> bool {
        self.per_seed.iter().flat_map(|b| &b.runs).any(|r| !r.ok)
    }
}

fn aggregate(per_seed: &[SeedBlock], methods: &[MethodArg]) -> Vec<Aggregate> {
    methods
        .iter()
        .enumerate()
        .map(|(k, &method)| {
            let ok: Vec<&MethodRun> = per_seed
                .iter()
                .map(|b| &b.runs[k])
                .filter(|r| r.ok)
                .collect();
            let mean = |f: &dyn Fn(&MethodRun) -> f64| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
                }
            };
            Aggregate {
                method,
                seeds_ok: ok.len(),
                failures: per_seed.len() - ok.len(),
                mean_res: mean(&|r| r.metrics.res),
                mean_mse_z: mean(&|r| r.metrics.mse_z),
                mean_mse_x: mean(&|r| r.metrics.mse_x),
                mean_iterations: mean(&|r| r.iterations as f64),
            }
        })
        .collect()
}

pub fn run_compare(args: &CompareArgs) -> Result<CompareReport, CliError> {
    check_sigma(args.case.sigma)?;
    if args.methods.is_empty() {
        return Err(CliError::BadConfig(
            "at least one method is required".into(),
        ));
    }
    let p = prepare(&args.case.case)?;
    let plan = resolve_plan(&p.net, &args.case.plan)?;
    let seeds = args.seeds.seeds();
    let per_seed = seeds
        .par_iter()
        .map(|&seed| -> Result<SeedBlock, CliError> {
            let ms = synthesize_measurements(&p.net, &p.truth, &plan, args.case.sigma, seed)?;
            let runs = args
                .methods
                .iter()
                .map(|&m| {
                    run_method(&p, &ms, m, args.max_iters, false, args.channels)
                        .map(MethodRun::strip_vectors)
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(SeedBlock { seed, runs })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CompareReport {
        case: args.case.case.display().to_string(),
        n_bus: p.net.n_bus(),
        plan: args.case.plan.clone(),
        sigma: args.case.sigma,
        seeds,
        methods: args.methods.clone(),
        rng: RNG_ALGORITHM,
        mse_z_space: "ecf: currents and voltages (p.u.); wls: |V|, P, Q and PMU phasors (p.u.)",
        aggregate: aggregate(&per_seed, &args.methods),
        per_seed,
    })
}

fn sci(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.5e}")
    } else {
        "-".to_string()
    }
}

/// Aligned text view of a report: one row per seed and method in report
/// order, then one mean row per method.
pub fn render_table(r: &CompareReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "case {}  plan {}  sigma {}  seeds {}",
        r.case,
        r.plan,
        r.sigma,
        r.seeds.len()
    );
    let _ = writeln!(
        s,
        "{:<6} {:<9} {:>12} {:>12} {:>12} {:>6}  note",
        "seed", "method", "res", "MSE_z", "MSE_x", "#iter"
    );
    let note = |run: &MethodRun| {
        if run.ok {
            String::new()
        } else {
            match run.method {
                MethodArg::Ecf => format!("failed: {}", run.status),
                _ => format!("diverged: {}", run.status),
            }
        }
    };
    for block in &r.per_seed {
        for run in &block.runs {
            let iters = if run.method == MethodArg::Ecf {
                "-".to_string()
            } else {
                run.iterations.to_string()
            };
            let _ = writeln!(
                s,
                "{:<6} {:<9} {:>12} {:>12} {:>12} {:>6}  {}",
                block.seed,
                run.method.name(),
                sci(run.metrics.res),
                sci(run.metrics.mse_z),
                sci(run.metrics.mse_x),
                iters,
                note(run)
            );
        }
    }
    for a in &r.aggregate {
        let iters = if a.method == MethodArg::Ecf || !a.mean_iterations.is_finite() {
            "-".to_string()
        } else {
            format!("{:.1}", a.mean_iterations)
        };
        let failures = if a.failures > 0 {
            format!("{} of {} seeds failed", a.failures, r.seeds.len())
        } else {
            String::new()
        };
        let _ = writeln!(
            s,
            "{:<6} {:<9} {:>12} {:>12} {:>12} {:>6}  {}",
            "mean",
            a.method.name(),
            sci(a.mean_res),
            sci(a.mean_mse_z),
            sci(a.mean_mse_x),
            iters,
            failures
        );
    }
    s
}

#[derive(Serialize)]
struct SingleRunReport<'a> {
    case: String,
    n_bus: usize,
    measurements: String,
    run: &'a MethodRun,
}

fn single_run(
    args: &EstimateArgs,
    method: MethodArg,
    max_iters: usize,
    line_search: bool,
) -> Result<i32, CliError> {
    let p = prepare(&args.case.case)?;
    let ms = measurement_set(&p, args)?;
    let run = run_method(&p, &ms, method, max_iters, line_search, args.channels)?;
    let measurements = match &args.meas {
        Some(path) => path.display().to_string(),
        None => format!(
            "plan {} sigma {} seed {}",
            args.case.plan, args.case.sigma, args.seed
        ),
    };
    let report = SingleRunReport {
        case: args.case.case.display().to_string(),
        n_bus: p.net.n_bus(),
        measurements,
        run: &run,
    };
    emit(args.out.as_deref(), &to_json(&report))?;
    Ok(if run.ok { 0 } else { 2 })
}

/// Executes a parsed command and returns the process exit code.
pub fn execute(cli: &Cli) -> Result<i32, CliError> {
    match &cli.command {
        Command::Synth(a) => {
            check_sigma(a.case.sigma)?;
            let p = prepare(&a.case.case)?;
            let plan = resolve_plan(&p.net, &a.case.plan)?;
            let ms = synthesize_measurements(&p.net, &p.truth, &plan, a.case.sigma, a.seed)?;
            let doc = MeasurementDocument::from_set(&p.net, &ms, a.case.sigma, a.seed);
            let mut text = doc.to_json();
            text.push('\n');
            emit(a.out.as_deref(), &text)?;
            Ok(0)
        }
        Command::Estimate(a) => single_run(a, MethodArg::Ecf, 0, false),
        Command::Wls(a) => {
            let method = match a.init {
                InitArg::Flat => MethodArg::WlsFlat,
                InitArg::Case => MethodArg::WlsCase,
            };
            single_run(&a.estimate, method, a.max_iters, a.line_search)
        }
        Command::Compare(a) => {
            let report = run_compare(a)?;
            let json = to_json(&report);
            match a.format {
                Format::Json => emit(a.out.as_deref(), &json)?,
                Format::Table => {
                    if let Some(path) = &a.out {
                        write_atomic(path, &json)?;
                    }
                    print!("{}", render_table(&report));
                }
            }
            Ok(if report.any_failure() { 2 } else { 0 })
        }
    }
}

/// Parses `args`, runs the command and maps every outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges() {
        assert_eq!(parse_seeds("1..10").unwrap().seeds().len(), 10);
        assert_eq!(parse_seeds("7").unwrap().seeds(), vec![7]);
        assert_eq!(parse_seeds("3..=4").unwrap().seeds(), vec![3, 4]);
        assert!(parse_seeds("5..2").is_err());
        assert!(parse_seeds("a..b").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(main_with_args(["ecfse", "compare", "--sigma", "x"]), 1);
        assert_eq!(main_with_args(["ecfse", "frobnicate"]), 1);
        assert_eq!(main_with_args(["ecfse", "--help"]), 0);
    }

    #[test]
    fn missing_case_file_exits_one() {
        assert_eq!(
            main_with_args(["ecfse", "estimate", "--case", "/nonexistent/case.m"]),
            1
        );
    }
}
