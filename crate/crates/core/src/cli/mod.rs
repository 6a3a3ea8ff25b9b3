//! `smoothsde` command-line front end.
//!
//! ```text
//! smoothsde <fit|simulate|residuals|predict|coverage> --config <path> [--out <dir>] [--seed <u64>]
//! ```
//!
//! Exit codes: 0 success, 1 numerical failure (including a fit that did not
//! converge), 2 user-input error. `SMOOTHSDE_THREADS` caps the worker pool.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::{GridConfig, RunConfig};

use crate::basis::{CovariateTable, FixedTerm, RandomTerm};
use crate::data::{fmt_f64, ingest_csv, Dataset, IngestOptions};
use crate::diagnostics::{acf, qq_points, replicate_study, residuals, StudyOptions};
use crate::error::{Error, Result};
use crate::inference::{fit, predict_parameters, FitResult, ModelSpec, ParameterCurve, PredictOptions};
use crate::sim::{run_scenario, COVARIATE};

pub const THREADS_ENV: &str = "SMOOTHSDE_THREADS";
pub const DEFAULT_SEED: u64 = 1;
pub const DEFAULT_MAX_LAG: usize = 20;

#[derive(Debug, Parser)]
#[command(name = "smoothsde", version, about = "Varying-coefficient SDE estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Subcommand)]
pub enum Command {
    /// Fit a model; writes fit.json and curves.csv.
    Fit(RunArgs),
    /// Simulate a scenario dataset; writes data.csv and truth.csv.
    Simulate(RunArgs),
    /// Standardized residuals, QQ pairs and ACF of a fit.
    Residuals(RunArgs),
    /// Parameter curves with bands on a covariate grid.
    Predict(RunArgs),
    /// Interval coverage and curve recovery over simulated replicates.
    Coverage(RunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Fit(_) => "fit",
            Command::Simulate(_) => "simulate",
            Command::Residuals(_) => "residuals",
            Command::Predict(_) => "predict",
            Command::Coverage(_) => "coverage",
        }
    }

    pub fn args(&self) -> &RunArgs {
        match self {
            Command::Fit(a)
            | Command::Simulate(a)
            | Command::Residuals(a)
            | Command::Predict(a)
            | Command::Coverage(a) => a,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    NotConverged,
    Error,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::NotConverged | Status::Error => 1,
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_user_error() {
        2
    } else {
        1
    }
}

#[derive(Serialize)]
struct FileEntry {
    name: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config_sha256: String,
    status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    files: &'a [FileEntry],
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

/// Write `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        io_err(path, e)
    })
}

/// Files written by one command, recorded for the manifest.
struct Outputs {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        self.files.push(FileEntry {
            name: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| Error::Config(format!("cannot serialize {name}: {e}")))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Data(format!("CSV error: {e}"));
        w.write_record(header).map_err(csv_err)?;
        for r in rows {
            w.write_record(r).map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Data(format!("CSV error: {e}")))?;
        self.write(name, &bytes)
    }
}

/// Parse arguments, run the command and return the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return exit_code(&e);
    }
    match execute(&cli.command) {
        Ok(Status::Ok) => 0,
        Ok(status) => {
            eprintln!("warning: {} finished with status {status:?}", cli.command.name());
            status.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
    // a pool that is already built (repeated calls in one process) is kept
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Run one command. Every run that gets as far as the output directory
/// leaves a `manifest.json`, including failed ones.
pub fn execute(command: &Command) -> Result<Status> {
    let args = command.args();
    let text = std::fs::read_to_string(&args.config).map_err(|e| io_err(&args.config, e))?;
    let mut cfg = RunConfig::from_json(&text)?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    cfg.resolve_paths(base);
    let seed = args
        .seed
        .or(cfg.seed)
        .or_else(|| match command {
            Command::Simulate(_) | Command::Coverage(_) => cfg.scenario.as_ref().map(|s| s.seed),
            _ => None,
        })
        .unwrap_or(DEFAULT_SEED);

    let mut out = Outputs::new(&args.out)?;
    let result = match command {
        Command::Fit(_) => cmd_fit(&cfg, seed, &mut out),
        Command::Simulate(_) => cmd_simulate(&cfg, seed, &mut out),
        Command::Residuals(_) => cmd_residuals(&cfg, &mut out),
        Command::Predict(_) => cmd_predict(&cfg, seed, &mut out),
        Command::Coverage(_) => cmd_coverage(&cfg, seed, &mut out),
    };
    let (status, error) = match &result {
        Ok(s) => (*s, None),
        Err(e) => (Status::Error, Some(e.to_string())),
    };
    let files = std::mem::take(&mut out.files);
    let manifest = Manifest {
        tool: "smoothsde",
        version: env!("CARGO_PKG_VERSION"),
        command: command.name(),
        seed,
        config_sha256: sha256_hex(text.as_bytes()),
        status,
        error,
        files: &files,
    };
    out.write_json("manifest.json", &manifest)?;
    result
}

fn load_data(cfg: &RunConfig, spec: &ModelSpec) -> Result<Dataset> {
    let opts = IngestOptions {
        responses: spec.response_names(),
        allow_missing_response: spec.family.is_latent(),
    };
    ingest_csv(cfg.require_data()?, &opts)
}

fn load_fit(path: &Path) -> Result<FitResult> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("invalid fit file '{}': {e}", path.display())))
}

/// Fit from `fit` when given, otherwise estimate from `data` and `model`.
fn obtain_fit(cfg: &RunConfig) -> Result<(FitResult, Option<Dataset>)> {
    if let Some(p) = &cfg.fit {
        let f = load_fit(p)?;
        let data = match &cfg.data {
            Some(_) => Some(load_data(cfg, &f.spec)?),
            None => None,
        };
        return Ok((f, data));
    }
    let spec = cfg.require_model()?;
    let data = load_data(cfg, spec)?;
    let f = fit(spec, &data)?;
    Ok((f, Some(data)))
}

/// Numeric covariates used by a fit, in order of first appearance.
fn fit_covariates(f: &FitResult) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for t in &f.terms {
        let fixed = t.fixed.iter().filter_map(|ft| match ft {
            FixedTerm::Linear { covariate } => Some(covariate),
            FixedTerm::Intercept => None,
        });
        let smooth = t.random.iter().filter_map(|rt| match rt {
            RandomTerm::Smooth { covariate, .. } => Some(covariate),
            RandomTerm::RandomIntercept { .. } => None,
        });
        for c in fixed.chain(smooth) {
            if !names.contains(c) {
                names.push(c.clone());
            }
        }
    }
    names
}

fn smooth_range(f: &FitResult, covariate: &str) -> Option<(f64, f64)> {
    f.terms.iter().flat_map(|t| &t.random).find_map(|rt| match rt {
        RandomTerm::Smooth { covariate: c, basis } if c == covariate => Some((basis.spline.lower, basis.spline.upper)),
        _ => None,
    })
}

/// Covariate grid for reporting curves, and the name of the varied
/// covariate (if the model has any).
pub fn grid_table(
    grid: &GridConfig,
    f: &FitResult,
    data: Option<&Dataset>,
) -> Result<(CovariateTable, Option<(String, Vec<f64>)>)> {
    let needed = fit_covariates(f);
    let Some(var) = grid.covariate.clone().or_else(|| needed.first().cloned()) else {
        return Ok((CovariateTable::new(1), None));
    };
    if grid.points < 2 {
        return Err(Error::Config("grid.points must be at least 2".into()));
    }
    let data_range = data
        .and_then(|d| d.covariate(&var).ok())
        .map(|v| {
            v.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
        });
    let fallback = data_range.or_else(|| smooth_range(f, &var));
    let (from, to) = match (grid.from, grid.to, fallback) {
        (Some(a), Some(b), _) => (a, b),
        (a, b, Some((lo, hi))) => (a.unwrap_or(lo), b.unwrap_or(hi)),
        _ => {
            return Err(Error::Config(format!(
                "grid range for '{var}' unknown: give grid.from and grid.to or a data file"
            )))
        }
    };
    let m = grid.points - 1;
    let xs: Vec<f64> = (0..=m).map(|i| from + (to - from) * i as f64 / m as f64).collect();
    let mut table = CovariateTable::new(grid.points).with_numeric(&var, xs.clone())?;
    for name in needed.iter().filter(|n| **n != var) {
        let value = match (grid.fixed.get(name), data) {
            (Some(&v), _) => v,
            (None, Some(d)) => {
                let v = d.covariate(name)?;
                v.iter().sum::<f64>() / v.len() as f64
            }
            (None, None) => {
                return Err(Error::Config(format!(
                    "no value for covariate '{name}': set grid.fixed.{name} or give a data file"
                )))
            }
        };
        table = table.with_numeric(name, vec![value; grid.points])?;
    }
    Ok((table, Some((var, xs))))
}

fn curves_rows(curves: &[ParameterCurve], xs: Option<&[f64]>) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for c in curves {
        for i in 0..c.estimate.len() {
            let mut r = vec![c.param.clone()];
            if let Some(xs) = xs {
                r.push(fmt_f64(xs[i]));
            }
            r.extend([fmt_f64(c.estimate[i]), fmt_f64(c.lower[i]), fmt_f64(c.upper[i])]);
            r.push(c.extrapolated[i].to_string());
            rows.push(r);
        }
    }
    rows
}

fn write_curves(cfg: &RunConfig, f: &FitResult, data: Option<&Dataset>, seed: u64, out: &mut Outputs) -> Result<()> {
    let grid = cfg.grid.clone().unwrap_or_default();
    let (table, var) = grid_table(&grid, f, data)?;
    let opts = PredictOptions {
        n_samples: grid.draws,
        level: grid.level,
        seed,
    };
    let curves = predict_parameters(f, &table, &opts)?;
    let mut header = vec!["param"];
    if let Some((name, _)) = &var {
        header.push(name);
    }
    header.extend(["estimate", "lower", "upper", "extrapolated"]);
    let rows = curves_rows(&curves, var.as_ref().map(|(_, xs)| xs.as_slice()));
    out.write_csv("curves.csv", &header, &rows)
}

#[derive(Serialize)]
struct FitDiagnostics<'a> {
    converged: bool,
    outer_iterations: usize,
    grad_norm: f64,
    inner_iterations: usize,
    degenerate: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    trace: &'a [f64],
}

fn cmd_fit(cfg: &RunConfig, seed: u64, out: &mut Outputs) -> Result<Status> {
    let spec = cfg.require_model()?;
    let data = load_data(cfg, spec)?;
    let f = match fit(spec, &data) {
        Ok(f) => f,
        Err(e) => {
            if !e.is_user_error() {
                out.write_json(
                    "diagnostics.json",
                    &FitDiagnostics {
                        converged: false,
                        outer_iterations: 0,
                        grad_norm: f64::NAN,
                        inner_iterations: 0,
                        degenerate: false,
                        error: Some(e.to_string()),
                        trace: &[],
                    },
                )?;
            }
            return Err(e);
        }
    };
    out.write_json("fit.json", &f)?;
    write_curves(cfg, &f, Some(&data), seed, out)?;
    if !f.converged {
        out.write_json(
            "diagnostics.json",
            &FitDiagnostics {
                converged: f.converged,
                outer_iterations: f.outer_iterations,
                grad_norm: f.grad_norm,
                inner_iterations: f.inner_iterations,
                degenerate: f.degenerate,
                error: None,
                trace: &f.trace,
            },
        )?;
        return Ok(Status::NotConverged);
    }
    Ok(Status::Ok)
}

fn cmd_predict(cfg: &RunConfig, seed: u64, out: &mut Outputs) -> Result<Status> {
    let (f, data) = obtain_fit(cfg)?;
    write_curves(cfg, &f, data.as_ref(), seed, out)?;
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct ResidualSummary {
    n: usize,
    reference: crate::sde::Reference,
    ks_statistic: f64,
    ks_p_value: f64,
    acf_bound: f64,
}

fn cmd_residuals(cfg: &RunConfig, out: &mut Outputs) -> Result<Status> {
    let family = match (&cfg.fit, &cfg.model) {
        (None, Some(m)) => Some(m.family),
        _ => None,
    };
    if family.is_some_and(|f| f.is_latent()) {
        return Err(Error::UnsupportedFamily(
            "residuals unsupported for latent-state families".into(),
        ));
    }
    cfg.require_data()?;
    let (f, data) = obtain_fit(cfg)?;
    let data = data.ok_or_else(|| Error::Config("missing 'data' path".into()))?;
    let res = residuals(&f, &data)?;
    let rows: Vec<Vec<String>> = (0..res.len())
        .map(|i| {
            vec![
                res.ids[i].clone(),
                res.index[i].to_string(),
                fmt_f64(res.times[i]),
                fmt_f64(res.values[i]),
            ]
        })
        .collect();
    out.write_csv("residuals.csv", &["ID", "index", "time", "residual"], &rows)?;
    let qq = qq_points(&res)?;
    let rows: Vec<Vec<String>> = qq.iter().map(|(t, e)| vec![fmt_f64(*t), fmt_f64(*e)]).collect();
    out.write_csv("qq.csv", &["theoretical", "empirical"], &rows)?;
    let max_lag = cfg.max_lag.unwrap_or(DEFAULT_MAX_LAG.min(res.len() - 1));
    let a = acf(&res.values, max_lag)?;
    let rows: Vec<Vec<String>> = a
        .values
        .iter()
        .enumerate()
        .map(|(k, v)| vec![k.to_string(), fmt_f64(*v), fmt_f64(-a.bound), fmt_f64(a.bound)])
        .collect();
    out.write_csv("acf.csv", &["lag", "acf", "lower", "upper"], &rows)?;
    let ks = res.ks_test();
    out.write_json(
        "residuals_summary.json",
        &ResidualSummary {
            n: res.len(),
            reference: res.reference,
            ks_statistic: ks.statistic,
            ks_p_value: ks.p_value,
            acf_bound: a.bound,
        },
    )?;
    Ok(Status::Ok)
}

fn cmd_simulate(cfg: &RunConfig, seed: u64, out: &mut Outputs) -> Result<Status> {
    let sc = cfg.require_scenario()?.with_seed(seed);
    let sim = run_scenario(&sc)?;
    let mut buf = Vec::new();
    sim.data.write_csv(&mut buf)?;
    out.write("data.csv", &buf)?;
    let grid = sc.grid();
    let (r, s) = sim.truth_on_grid();
    let rows: Vec<Vec<String>> = (0..grid.len())
        .map(|i| vec![fmt_f64(grid[i]), fmt_f64(r[i]), fmt_f64(s[i])])
        .collect();
    out.write_csv("truth.csv", &[COVARIATE, "r", "s"], &rows)?;
    Ok(Status::Ok)
}

fn cmd_coverage(cfg: &RunConfig, seed: u64, out: &mut Outputs) -> Result<Status> {
    let sc = cfg.require_scenario()?.with_seed(seed);
    let opts = cfg.study.unwrap_or_else(StudyOptions::default);
    let report = replicate_study(&sc, &opts)?;
    let cov = &report.coverage;
    let mut rows = Vec::new();
    for p in &cov.params {
        for (x, c) in cov.grid.iter().zip(&p.by_grid) {
            rows.push(vec![p.param.clone(), fmt_f64(*x), fmt_f64(*c)]);
        }
    }
    out.write_csv("coverage.csv", &["param", COVARIATE, "coverage"], &rows)?;
    out.write_json("coverage_summary.json", &report)?;
    Ok(Status::Ok)
}
