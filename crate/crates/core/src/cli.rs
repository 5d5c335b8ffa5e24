//! Command-line front end: fitting over quantile grids, diagnostics,
//! bootstrap intervals, random-effect prediction and simulation.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{make_plan, mean_widths, run_shared, BootMethod, DEFAULT_LOWER, DEFAULT_UPPER};
use crate::dataset::{build_cells, filter_min_count, load_csv, Dataset, Schema};
use crate::eq::fit_eq;
use crate::lqm::{fit_lqm, LqmMethod};
use crate::lqmm::{fit_lqmm, species_coefficients, LqmmOptions};
use crate::meq::{fit_meq, predict_ranef_meq, Criterion, GroupedCells, MeqOptions, MixedParams};
use crate::qr::{fit_qr, fit_qr_interactions, CovariateSelection};
use crate::ranef::{blup_params, BlupMode};
use crate::simgen::{simulate, SimSpec};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const FIXED: &str = "fixed";
pub const DEFAULT_DIAG_TOL: f64 = 1e-10;

/// Strictly increasing quantile levels in (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauGrid(Vec<f64>);

impl TauGrid {
    pub fn new(taus: Vec<f64>) -> Result<Self> {
        if taus.is_empty() {
            return Err(Error::Config("empty quantile grid".into()));
        }
        if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::Config(format!("quantile level {t} outside (0, 1)")));
        }
        if taus.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("quantile grid must be strictly increasing".into()));
        }
        Ok(Self(taus))
    }

    /// `0.01, 0.02, ..., 0.99`.
    pub fn single_species() -> Self {
        Self::parse("0.01:0.99:0.01").expect("valid default grid")
    }

    /// `0.01, 0.05, 0.10, ..., 0.95, 0.99`.
    pub fn multi_species() -> Self {
        let mut v = vec![0.01];
        v.extend(Self::parse("0.05:0.95:0.05").expect("valid default grid").0);
        v.push(0.99);
        Self(v)
    }

    /// Comma list (`0.1,0.5,0.9`) or inclusive range `start:stop:step`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.contains(':') {
            let parts: Vec<&str> = s.split(':').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(Error::Config(format!("range `{s}` must be start:stop:step")));
            }
            let num = |p: &str| p.parse::<f64>().map_err(|_| Error::Config(format!("cannot parse `{p}` in `{s}`")));
            let (start, stop, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
            if !(step > 0.0) || stop < start {
                return Err(Error::Config(format!("range `{s}` needs a positive step and stop >= start")));
            }
            let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
            // snap to 12 decimals so 0.07 is the double nearest to 0.07
            let taus = (0..count).map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12).collect();
            Self::new(taus)
        } else {
            let taus: Vec<f64> = s
                .split(',')
                .map(|p| p.trim().parse::<f64>().map_err(|_| Error::Config(format!("cannot parse `{p}`"))))
                .collect::<Result<_>>()?;
            Self::new(taus)
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    Eq,
    Qr,
    Lqm,
    Meq,
    Lqmm,
    QrInteract,
}

impl FitMethod {
    pub fn name(&self) -> &'static str {
        match self {
            FitMethod::Eq => "eq",
            FitMethod::Qr => "qr",
            FitMethod::Lqm => "lqm",
            FitMethod::Meq => "meq",
            FitMethod::Lqmm => "lqmm",
            FitMethod::QrInteract => "qr-interact",
        }
    }

    pub fn default_grid(&self) -> TauGrid {
        match self {
            FitMethod::Eq | FitMethod::Qr | FitMethod::Lqm => TauGrid::single_species(),
            _ => TauGrid::multi_species(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CriterionArg {
    Ml,
    Reml,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LqmMethodArg {
    NelderMead,
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Dense,
    Block,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BootMethodArg {
    Eq,
    Qr,
    Lqm,
}

#[derive(Debug, Parser)]
#[command(name = "phenoquant", version, about = "Quantile models for grouped arrival-day data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one method over a quantile grid.
    Fit(FitArgs),
    /// Monotonicity and crossing diagnostics of a fit report.
    Diagnose(DiagnoseArgs),
    /// Pairs-bootstrap percentile intervals with shared resamples.
    Bootstrap(BootstrapArgs),
    /// Predict lqmm random effects.
    Ranef(RanefArgs),
    /// Simulate a dataset from a key = value spec.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    /// Input CSV with columns group, year, day, covariates, optional count_weight.
    #[arg(long)]
    pub input: PathBuf,
    /// Covariate declaration, e.g. `age:binary,wing:real,site:categorical`.
    #[arg(long, default_value = "")]
    pub covariates: String,
    /// Year subtracted from every raw year (default: integer median).
    #[arg(long)]
    pub center_year: Option<i64>,
    /// Drop groups with fewer observations.
    #[arg(long, default_value_t = 150)]
    pub min_count: usize,
}

impl DataArgs {
    pub fn load(&self) -> Result<Dataset> {
        let schema = Schema::parse(&self.covariates)?;
        let ds = load_csv(&self.input, &schema, self.center_year)?;
        let ds = filter_min_count(&ds, self.min_count)?;
        if ds.is_empty() {
            return Err(Error::Precondition(format!("no group has at least {} observations", self.min_count)));
        }
        Ok(ds)
    }
}

#[derive(Debug, Args, Clone)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub method: FitMethod,
    /// Comma list or start:stop:step (default depends on the method).
    #[arg(long)]
    pub tau_grid: Option<String>,
    /// Weight cells by member count (eq, meq).
    #[arg(long, overrides_with = "unweighted")]
    pub weighted: bool,
    #[arg(long, overrides_with = "weighted")]
    pub unweighted: bool,
    #[arg(long, value_enum, default_value = "reml")]
    pub criterion: CriterionArg,
    #[arg(long, default_value_t = crate::lqmm::DEFAULT_KNOTS)]
    pub knots: usize,
    #[arg(long)]
    pub multi_start: bool,
    #[arg(long, value_enum, default_value = "nelder-mead")]
    pub lqm_method: LqmMethodArg,
    /// Seed for multi-start jitter.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Tolerance for labelling diagnostics as numerical.
    #[arg(long, default_value_t = DEFAULT_DIAG_TOL)]
    pub tol: f64,
    /// JSON report path.
    #[arg(long)]
    pub out: PathBuf,
    /// Flat coefficient CSV path.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DIAG_TOL)]
    pub tol: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct BootstrapArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated subset of eq, qr, lqm.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "qr")]
    pub methods: Vec<BootMethodArg>,
    #[arg(long)]
    pub tau_grid: Option<String>,
    #[arg(long = "B", default_value_t = crate::bootstrap::DEFAULT_REPLICATES)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long, overrides_with = "unweighted")]
    pub weighted: bool,
    #[arg(long, overrides_with = "weighted")]
    pub unweighted: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct RanefArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// lqmm fit report to take parameters from; fits afresh when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub tau_grid: Option<String>,
    #[arg(long, value_enum, default_value = "block")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = crate::lqmm::DEFAULT_KNOTS)]
    pub knots: usize,
    #[arg(long)]
    pub multi_start: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// û table rounded to 1e-9.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed of the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Version, seed and the full argument list of the producing run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub version: String,
    pub seed: Option<u64>,
    pub args: Vec<String>,
}

impl RunInfo {
    pub fn new(seed: Option<u64>, args: &[String]) -> Self {
        Self { version: env!("CARGO_PKG_VERSION").to_string(), seed, args: args.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauFit {
    pub tau: f64,
    pub ok: bool,
    pub error: Option<String>,
    pub objective: Option<f64>,
    pub loglik: Option<f64>,
    pub converged: bool,
    /// Mixed-model parameters (meq, lqmm).
    pub params: Option<MixedParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefRow {
    pub tau: f64,
    /// Group name, or `fixed` for population-level coefficients.
    pub group: String,
    pub name: String,
    pub estimate: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupYears {
    pub group: String,
    pub min: i64,
    pub max: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityViolation {
    pub group: String,
    pub tau_lo: f64,
    pub tau_hi: f64,
    /// Decrease of the intercept from `tau_lo` to `tau_hi`.
    pub magnitude: f64,
    pub numerical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub group: String,
    pub tau_lo: f64,
    pub tau_hi: f64,
    /// Centered year where the lines intersect inside the observed range;
    /// `None` when the higher line lies below over the whole range.
    pub year: Option<f64>,
    /// Largest depth of the inversion over the observed range.
    pub magnitude: f64,
    pub numerical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub tol: f64,
    pub monotonicity: Vec<MonotonicityViolation>,
    pub crossings: Vec<Crossing>,
    pub violations_above_tol: usize,
    pub crossings_above_tol: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub method: String,
    pub taus: Vec<f64>,
    pub center_year: i64,
    pub groups: Vec<GroupYears>,
    pub fits: Vec<TauFit>,
    pub coefficients: Vec<CoefRow>,
    pub diagnostics: Option<Diagnostics>,
    pub run: RunInfo,
}

impl FitReport {
    /// `(intercept, year slope)` of `group` at `tau`, if reported.
    pub fn line(&self, group: &str, tau: f64) -> Option<(f64, f64)> {
        let find = |name: &str| {
            self.coefficients
                .iter()
                .find(|c| c.group == group && c.tau == tau && c.name == name)
                .map(|c| c.estimate)
        };
        Some((find("intercept")?, find("year")?))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: FitReport = serde_json::from_str(s)?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "report schema version {} is not supported (expected {SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }

    /// One row per coefficient x tau x group.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["method", "tau", "group", "coefficient", "estimate", "lower", "upper"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.coefficients {
            out.write_record([
                self.method.clone(),
                c.tau.to_string(),
                c.group.clone(),
                c.name.clone(),
                c.estimate.to_string(),
                opt(c.lower),
                opt(c.upper),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Intercept monotonicity and adjacent-pair crossings of every group.
pub fn diagnose(report: &FitReport, tol: f64) -> Diagnostics {
    let mut groups: Vec<String> = Vec::new();
    for c in &report.coefficients {
        if !groups.contains(&c.group) {
            groups.push(c.group.clone());
        }
    }
    let overall = report.groups.iter().fold(None, |acc: Option<(i64, i64)>, g| match acc {
        None => Some((g.min, g.max)),
        Some((a, b)) => Some((a.min(g.min), b.max(g.max))),
    });
    let mut monotonicity = Vec::new();
    let mut crossings = Vec::new();
    for g in &groups {
        let lines: Vec<(f64, f64, f64)> = report
            .taus
            .iter()
            .filter_map(|&t| report.line(g, t).map(|(a, b)| (t, a, b)))
            .collect();
        let range = report
            .groups
            .iter()
            .find(|y| &y.group == g)
            .map(|y| (y.min, y.max))
            .or(overall);
        for w in lines.windows(2) {
            let ((t0, a0, b0), (t1, a1, b1)) = (w[0], w[1]);
            if a1 < a0 {
                let magnitude = a0 - a1;
                monotonicity.push(MonotonicityViolation {
                    group: g.clone(),
                    tau_lo: t0,
                    tau_hi: t1,
                    magnitude,
                    numerical: magnitude <= tol,
                });
            }
            let Some((lo, hi)) = range else { continue };
            let (lo, hi) = (lo as f64, hi as f64);
            let d = |t: f64| (a1 + b1 * t) - (a0 + b0 * t);
            let (dl, dh) = (d(lo), d(hi));
            if dl < 0.0 || dh < 0.0 {
                let magnitude = -dl.min(dh);
                let year = if (dl < 0.0) != (dh < 0.0) && b1 != b0 { Some(-(a1 - a0) / (b1 - b0)) } else { None };
                crossings.push(Crossing {
                    group: g.clone(),
                    tau_lo: t0,
                    tau_hi: t1,
                    year,
                    magnitude,
                    numerical: magnitude <= tol,
                });
            }
        }
    }
    Diagnostics {
        tol,
        violations_above_tol: monotonicity.iter().filter(|v| !v.numerical).count(),
        crossings_above_tol: crossings.iter().filter(|c| !c.numerical).count(),
        monotonicity,
        crossings,
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn group_years(ds: &Dataset) -> Vec<GroupYears> {
    ds.groups()
        .into_iter()
        .map(|(g, r)| {
            let obs = &ds.observations()[r];
            GroupYears {
                group: g,
                min: obs.iter().map(|o| o.year).min().unwrap_or(0),
                max: obs.iter().map(|o| o.year).max().unwrap_or(0),
            }
        })
        .collect()
}

fn coef_rows(tau: f64, group: &str, names: &[String], beta: &[f64]) -> Vec<CoefRow> {
    names
        .iter()
        .zip(beta)
        .map(|(n, b)| CoefRow { tau, group: group.to_string(), name: n.clone(), estimate: *b, lower: None, upper: None })
        .collect()
}

fn failed(tau: f64, e: &Error) -> TauFit {
    TauFit { tau, ok: false, error: Some(e.to_string()), objective: None, loglik: None, converged: false, params: None }
}

/// One tau of `cmd_fit`: the fit summary and its coefficient rows.
fn fit_one(ds: &Dataset, args: &FitArgs, tau: f64) -> (TauFit, Vec<CoefRow>, Option<Error>) {
    let weighted = !args.unweighted;
    let result: Result<(TauFit, Vec<CoefRow>)> = (|| match args.method {
        FitMethod::Eq | FitMethod::Qr | FitMethod::Lqm => {
            let mut rows = Vec::new();
            let mut objective = 0.0;
            let mut loglik = Some(0.0);
            let mut converged = true;
            for g in ds.group_names() {
                let sub = ds.group_subset(&g);
                match args.method {
                    FitMethod::Eq => {
                        let f = fit_eq(&build_cells(&sub)?, tau, weighted)?;
                        objective += f.sigma2;
                        loglik = loglik.zip(f.loglik).map(|(a, b)| a + b);
                        rows.extend(coef_rows(tau, &g, &f.names, &f.beta));
                    }
                    FitMethod::Qr => {
                        let f = fit_qr(&sub, tau, &CovariateSelection::All)?;
                        objective += f.objective;
                        loglik = None;
                        rows.extend(coef_rows(tau, &g, &f.names, &f.beta));
                    }
                    _ => {
                        let m = match args.lqm_method {
                            LqmMethodArg::NelderMead => LqmMethod::NelderMead,
                            LqmMethodArg::Gradient => LqmMethod::Gradient,
                        };
                        let f = fit_lqm(&sub, tau, m, &CovariateSelection::All)?;
                        objective += f.pinball_sum;
                        loglik = loglik.map(|a| a + f.loglik);
                        converged &= f.converged;
                        rows.extend(coef_rows(tau, &g, &f.names, &f.beta));
                    }
                }
            }
            let fit = TauFit { tau, ok: true, error: None, objective: Some(objective), loglik, converged, params: None };
            Ok((fit, rows))
        }
        FitMethod::QrInteract => {
            let f = fit_qr_interactions(ds, tau)?;
            let mut rows = coef_rows(tau, FIXED, &f.fit.names, &f.fit.beta);
            for line in &f.groups {
                rows.extend(coef_rows(tau, &line.group, &["intercept".into(), "year".into()], &[line.intercept, line.slope]));
            }
            let fit = TauFit {
                tau,
                ok: true,
                error: None,
                objective: Some(f.fit.objective),
                loglik: None,
                converged: true,
                params: None,
            };
            Ok((fit, rows))
        }
        FitMethod::Meq => {
            let criterion = match args.criterion {
                CriterionArg::Ml => Criterion::Ml,
                CriterionArg::Reml => Criterion::Reml,
            };
            let opts = MeqOptions { criterion, weighted, ..Default::default() };
            let cells = build_cells(ds)?;
            let fit = fit_meq(&cells, tau, &opts)?;
            let grouped = GroupedCells::new(&cells, tau, weighted)?;
            let re = predict_ranef_meq(&fit, &grouped)?;
            let mut rows = coef_rows(tau, FIXED, &fit.names, &fit.params.beta);
            for line in species_coefficients(&fit.params, &re) {
                rows.extend(coef_rows(tau, &line.group, &["intercept".into(), "year".into()], &[line.intercept, line.slope]));
            }
            let tf = TauFit {
                tau,
                ok: true,
                error: None,
                objective: None,
                loglik: Some(fit.loglik),
                converged: fit.converged,
                params: Some(fit.params),
            };
            Ok((tf, rows))
        }
        FitMethod::Lqmm => {
            let opts = LqmmOptions {
                knots: args.knots,
                multi_start: args.multi_start,
                jitter_seed: args.seed,
                ..Default::default()
            };
            let fit = fit_lqmm(ds, tau, &opts, None)?;
            let re = blup_params(&fit.params, &fit.groups, ds, BlupMode::Block)?;
            let mut rows = coef_rows(tau, FIXED, &fit.names, &fit.params.beta);
            for line in species_coefficients(&fit.params, &re) {
                rows.extend(coef_rows(tau, &line.group, &["intercept".into(), "year".into()], &[line.intercept, line.slope]));
            }
            let tf = TauFit {
                tau,
                ok: true,
                error: None,
                objective: None,
                loglik: Some(fit.loglik),
                converged: fit.converged,
                params: Some(fit.params),
            };
            Ok((tf, rows))
        }
    })();
    match result {
        Ok((f, r)) => (f, r, None),
        Err(e) => (failed(tau, &e), Vec::new(), Some(e)),
    }
}

pub fn cmd_fit(args: &FitArgs, argv: &[String]) -> Result<FitReport> {
    let ds = args.data.load()?;
    let grid = match &args.tau_grid {
        Some(s) => TauGrid::parse(s)?,
        None => args.method.default_grid(),
    };
    let results: Vec<(TauFit, Vec<CoefRow>, Option<Error>)> =
        with_jobs(args.jobs, || grid.values().par_iter().map(|&tau| fit_one(&ds, args, tau)).collect())?;
    if let Some(first) = results.iter().find_map(|r| r.2.as_ref()).filter(|_| results.iter().all(|r| r.2.is_some())) {
        return Err(match first {
            Error::Solver { message, best } => Error::solver(format!("every quantile failed; first: {message}"), best.clone()),
            other => Error::Precondition(format!("every quantile failed; first: {other}")),
        });
    }
    let mut fits = Vec::new();
    let mut coefficients = Vec::new();
    for (f, rows, _) in results {
        fits.push(f);
        coefficients.extend(rows);
    }
    let mut report = FitReport {
        schema_version: SCHEMA_VERSION,
        method: args.method.name().to_string(),
        taus: grid.values().to_vec(),
        center_year: ds.center_year(),
        groups: group_years(&ds),
        fits,
        coefficients,
        diagnostics: None,
        run: RunInfo::new(Some(args.seed), argv),
    };
    if report.taus.len() >= 2 {
        report.diagnostics = Some(diagnose(&report, args.tol));
    }
    write_atomic(&args.out, report.to_json()?.as_bytes())?;
    if let Some(p) = &args.csv {
        let mut buf = Vec::new();
        report.write_csv(&mut buf)?;
        write_atomic(p, &buf)?;
    }
    Ok(report)
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<Diagnostics> {
    let report = FitReport::from_json(&std::fs::read_to_string(&args.report)?)?;
    if report.taus.len() < 2 {
        return Err(Error::Precondition("diagnostics need at least two quantile levels".into()));
    }
    let d = diagnose(&report, args.tol);
    write_atomic(&args.out, serde_json::to_string_pretty(&d)?.as_bytes())?;
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub schema_version: u32,
    pub replicates: usize,
    pub seed: u64,
    pub lower: f64,
    pub upper: f64,
    pub taus: Vec<f64>,
    pub intervals: Vec<crate::bootstrap::CiRow>,
    /// (method, coefficient, mean width over tau).
    pub mean_widths: Vec<(String, String, f64)>,
    pub run: RunInfo,
}

pub fn cmd_bootstrap(args: &BootstrapArgs, argv: &[String]) -> Result<BootstrapReport> {
    let ds = args.data.load()?;
    let grid = match &args.tau_grid {
        Some(s) => TauGrid::parse(s)?,
        None => TauGrid::single_species(),
    };
    let weighted = !args.unweighted;
    let methods: Vec<BootMethod> = args
        .methods
        .iter()
        .map(|m| match m {
            BootMethodArg::Eq => BootMethod::Eq { weighted },
            BootMethodArg::Qr => BootMethod::Qr,
            BootMethodArg::Lqm => BootMethod::Lqm(LqmMethod::NelderMead),
        })
        .collect();
    let plan = make_plan(ds.len(), args.replicates, args.seed)?;
    let shared = with_jobs(args.jobs, || run_shared(&ds, &methods, grid.values(), &plan))??;
    let intervals = shared.intervals(DEFAULT_LOWER, DEFAULT_UPPER)?;
    let report = BootstrapReport {
        schema_version: SCHEMA_VERSION,
        replicates: args.replicates,
        seed: args.seed,
        lower: DEFAULT_LOWER,
        upper: DEFAULT_UPPER,
        taus: grid.values().to_vec(),
        mean_widths: mean_widths(&intervals),
        intervals,
        run: RunInfo::new(Some(args.seed), argv),
    };
    write_atomic(&args.out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    if let Some(p) = &args.csv {
        let mut out = csv::Writer::from_writer(Vec::new());
        out.write_record(["method", "tau", "coefficient", "lower", "upper", "included", "failed"])?;
        for r in &report.intervals {
            out.write_record([
                r.method.clone(),
                r.tau.to_string(),
                r.coefficient.clone(),
                r.interval.lower.to_string(),
                r.interval.upper.to_string(),
                r.interval.included.to_string(),
                r.interval.failed.to_string(),
            ])?;
        }
        let buf = out.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        write_atomic(p, &buf)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RanefRow {
    pub tau: f64,
    pub group: String,
    pub u_intercept: f64,
    pub u_slope: f64,
    pub intercept: f64,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RanefReport {
    pub schema_version: u32,
    pub mode: String,
    pub taus: Vec<f64>,
    pub rows: Vec<RanefRow>,
    pub errors: Vec<(f64, String)>,
    pub run: RunInfo,
}

pub fn cmd_ranef(args: &RanefArgs, argv: &[String]) -> Result<RanefReport> {
    let ds = args.data.load()?;
    let mode = match args.mode {
        ModeArg::Dense => BlupMode::Dense,
        ModeArg::Block => BlupMode::Block,
        ModeArg::Sequential => BlupMode::Sequential,
    };
    let params: Vec<(f64, Result<(MixedParams, Vec<String>)>)> = match &args.report {
        Some(path) => {
            let rep = FitReport::from_json(&std::fs::read_to_string(path)?)?;
            if rep.method != "lqmm" {
                return Err(Error::Schema(format!("report is for `{}`, expected an lqmm fit", rep.method)));
            }
            let groups: Vec<String> = rep.groups.iter().map(|g| g.group.clone()).collect();
            rep.fits
                .iter()
                .filter_map(|f| f.params.clone().map(|p| (f.tau, Ok((p, groups.clone())))))
                .collect()
        }
        None => {
            let grid = match &args.tau_grid {
                Some(s) => TauGrid::parse(s)?,
                None => TauGrid::multi_species(),
            };
            let opts = LqmmOptions {
                knots: args.knots,
                multi_start: args.multi_start,
                jitter_seed: args.seed,
                ..Default::default()
            };
            with_jobs(args.jobs, || {
                grid.values()
                    .par_iter()
                    .map(|&tau| (tau, fit_lqmm(&ds, tau, &opts, None).map(|f| (f.params, f.groups))))
                    .collect()
            })?
        }
    };
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    let mut taus = Vec::new();
    for (tau, p) in params {
        taus.push(tau);
        match p.and_then(|(p, groups)| blup_params(&p, &groups, &ds, mode).map(|re| (p, re))) {
            Ok((p, re)) => {
                for (line, u) in species_coefficients(&p, &re).into_iter().zip(&re.rows) {
                    rows.push(RanefRow {
                        tau,
                        group: line.group,
                        u_intercept: u[0],
                        u_slope: u[1],
                        intercept: line.intercept,
                        slope: line.slope,
                    });
                }
            }
            Err(e) => errors.push((tau, e.to_string())),
        }
    }
    if rows.is_empty() {
        if let Some((_, e)) = errors.first() {
            return Err(Error::Precondition(format!("no quantile produced random effects; first: {e}")));
        }
    }
    let report = RanefReport {
        schema_version: SCHEMA_VERSION,
        mode: format!("{mode:?}").to_lowercase(),
        taus,
        rows,
        errors,
        run: RunInfo::new(Some(args.seed), argv),
    };
    write_atomic(&args.out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    if let Some(p) = &args.csv {
        write_atomic(p, ranef_csv(&report)?.as_bytes())?;
    }
    Ok(report)
}

/// û table with every value rounded to 9 decimals.
pub fn ranef_csv(report: &RanefReport) -> Result<String> {
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(["tau", "group", "u_intercept", "u_slope", "intercept", "slope"])?;
    let r9 = |v: f64| {
        let s = format!("{v:.9}");
        // avoid a distinct "-0.000000000"
        if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
            s.trim_start_matches('-').to_string()
        } else {
            s
        }
    };
    for r in &report.rows {
        out.write_record([
            r.tau.to_string(),
            r.group.clone(),
            r9(r.u_intercept),
            r9(r.u_slope),
            r9(r.intercept),
            r9(r.slope),
        ])?;
    }
    let buf = out.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(buf).map_err(|e| Error::Schema(e.to_string()))
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<Dataset> {
    let mut spec = SimSpec::load(&args.config)?;
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let ds = simulate(&spec)?;
    let mut buf = Vec::new();
    ds.write_csv(&mut buf)?;
    write_atomic(&args.out, &buf)?;
    Ok(ds)
}

/// Exit status for an error: 3 data/schema, 4 solver, 5 internal.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Schema(_)
        | Error::Row { .. }
        | Error::Precondition(_)
        | Error::Design { .. }
        | Error::Size(_)
        | Error::Ordering(_)
        | Error::Mapping(_)
        | Error::Config(_)
        | Error::Io(_)
        | Error::Csv(_)
        | Error::Json(_) => 3,
        Error::Solver { .. } | Error::NonFinite(_) => 4,
        Error::Bootstrap(_) | Error::Unsupported(_) | Error::Refused(_) | Error::Numerical(_) => 5,
    }
}

/// Runs a parsed command line; `argv` is echoed into every report.
pub fn run(cli: Cli, argv: &[String]) -> Result<()> {
    match cli.command {
        Command::Fit(a) => cmd_fit(&a, argv).map(|_| ()),
        Command::Diagnose(a) => cmd_diagnose(&a).map(|_| ()),
        Command::Bootstrap(a) => cmd_bootstrap(&a, argv).map(|_| ()),
        Command::Ranef(a) => cmd_ranef(&a, argv).map(|_| ()),
        Command::Simulate(a) => cmd_simulate(&a).map(|_| ()),
    }
}
