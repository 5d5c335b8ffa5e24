//! Pairs bootstrap over observations, with one resample shared by every
//! requested method so their intervals are directly comparable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_cells, empirical_quantile, Dataset};
use crate::eq::fit_eq;
use crate::lqm::{fit_lqm_design, LqmMethod};
use crate::qr::{fit_design, observation_design, CovariateSelection};
use crate::{Error, Result};

pub const DEFAULT_REPLICATES: usize = 1000;
pub const DEFAULT_LOWER: f64 = 0.025;
pub const DEFAULT_UPPER: f64 = 0.975;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapPlan {
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub lower: f64,
    pub upper: f64,
    /// One list of `n` indices, drawn with replacement, per replicate.
    pub indices: Vec<Vec<usize>>,
}

pub fn make_plan(n: usize, replicates: usize, seed: u64) -> Result<BootstrapPlan> {
    if n == 0 || replicates == 0 {
        return Err(Error::Precondition(format!("bootstrap needs n >= 1 and B >= 1, got n = {n}, B = {replicates}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = (0..replicates).map(|_| (0..n).map(|_| rng.random_range(0..n)).collect()).collect();
    Ok(BootstrapPlan { n, replicates, seed, lower: DEFAULT_LOWER, upper: DEFAULT_UPPER, indices })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    pub included: usize,
    pub failed: usize,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn covers(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// Percentile interval from per-replicate estimates (`None` = failed fit).
pub fn ci(estimates: &[Option<f64>], lower: f64, upper: f64) -> Result<Interval> {
    if !(0.0 < lower && lower < upper && upper < 1.0) {
        return Err(Error::Precondition(format!("percentiles ({lower}, {upper}) must satisfy 0 < lower < upper < 1")));
    }
    let mut ok: Vec<f64> = estimates.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    let failed = estimates.len() - ok.len();
    if ok.is_empty() {
        return Err(Error::Bootstrap(format!("all {} replicates failed", estimates.len())));
    }
    if ok.len() < 2 {
        return Err(Error::Bootstrap("fewer than 2 successful replicates".into()));
    }
    ok.sort_by(f64::total_cmp);
    Ok(Interval {
        lower: empirical_quantile(&ok, lower)?,
        upper: empirical_quantile(&ok, upper)?,
        included: ok.len(),
        failed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootMethod {
    Eq { weighted: bool },
    Qr,
    Lqm(LqmMethod),
}

impl BootMethod {
    pub fn label(&self) -> String {
        match self {
            BootMethod::Eq { weighted: true } => "eq".into(),
            BootMethod::Eq { weighted: false } => "eq_unweighted".into(),
            BootMethod::Qr => "qr".into(),
            BootMethod::Lqm(LqmMethod::NelderMead) => "lqm_nelder_mead".into(),
            BootMethod::Lqm(LqmMethod::Gradient) => "lqm_gradient".into(),
        }
    }
}

/// Coefficients and attained objective of one successful replicate fit.
/// The objective is the pinball sum for qr and lqm, and `sigma2` for eq.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFit {
    pub beta: Vec<f64>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedBootstrap {
    pub methods: Vec<BootMethod>,
    pub taus: Vec<f64>,
    pub names: Vec<String>,
    /// `fits[method][tau][replicate]`.
    pub fits: Vec<Vec<Vec<Option<ReplicateFit>>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiRow {
    pub method: String,
    pub tau: f64,
    pub coefficient: String,
    pub interval: Interval,
}

impl SharedBootstrap {
    pub fn estimates(&self, method: usize, tau: usize, coef: usize) -> Vec<Option<f64>> {
        self.fits[method][tau].iter().map(|f| f.as_ref().map(|f| f.beta[coef])).collect()
    }

    pub fn failures(&self, method: usize, tau: usize) -> usize {
        self.fits[method][tau].iter().filter(|f| f.is_none()).count()
    }

    /// Percentile intervals for every method, `tau` and coefficient.
    pub fn intervals(&self, lower: f64, upper: f64) -> Result<Vec<CiRow>> {
        let mut rows = Vec::new();
        for (m, method) in self.methods.iter().enumerate() {
            for (t, &tau) in self.taus.iter().enumerate() {
                for (c, name) in self.names.iter().enumerate() {
                    rows.push(CiRow {
                        method: method.label(),
                        tau,
                        coefficient: name.clone(),
                        interval: ci(&self.estimates(m, t, c), lower, upper)?,
                    });
                }
            }
        }
        Ok(rows)
    }
}

/// Mean interval width per (method, coefficient), averaged over `tau`.
pub fn mean_widths(rows: &[CiRow]) -> Vec<(String, String, f64)> {
    let mut out: Vec<(String, String, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|o| o.0 == r.method && o.1 == r.coefficient) {
            Some(o) => {
                o.2 += r.interval.width();
                o.3 += 1;
            }
            None => out.push((r.method.clone(), r.coefficient.clone(), r.interval.width(), 1)),
        }
    }
    out.into_iter().map(|(m, c, s, n)| (m, c, s / n as f64)).collect()
}

fn fit_replicate(ds: &Dataset, method: BootMethod, tau: f64) -> Result<ReplicateFit> {
    match method {
        BootMethod::Eq { weighted } => {
            let cells = build_cells(ds)?;
            let f = fit_eq(&cells, tau, weighted)?;
            Ok(ReplicateFit { beta: f.beta, objective: f.sigma2 })
        }
        BootMethod::Qr => {
            let d = observation_design(ds, &CovariateSelection::All)?;
            let f = fit_design(&d, tau)?;
            Ok(ReplicateFit { beta: f.beta, objective: f.objective })
        }
        BootMethod::Lqm(m) => {
            let d = observation_design(ds, &CovariateSelection::All)?;
            let f = fit_lqm_design(&d, tau, m)?;
            Ok(ReplicateFit { beta: f.beta, objective: f.pinball_sum })
        }
    }
}

/// Fits every method at every `tau` on each resample. Failures are kept as
/// `None`; replicates may run concurrently but results keep plan order.
pub fn run_shared(ds: &Dataset, methods: &[BootMethod], taus: &[f64], plan: &BootstrapPlan) -> Result<SharedBootstrap> {
    if methods.is_empty() {
        return Err(Error::Precondition("no bootstrap methods requested".into()));
    }
    if plan.n != ds.len() {
        return Err(Error::Precondition(format!("plan is for {} observations, data has {}", plan.n, ds.len())));
    }
    let mut names = vec!["intercept".to_string(), "year".to_string()];
    names.extend(ds.covariate_names());
    let per_rep: Vec<Vec<Vec<Option<ReplicateFit>>>> = plan
        .indices
        .par_iter()
        .map(|idx| {
            let resample = ds.resample(idx);
            methods
                .iter()
                .map(|&m| taus.iter().map(|&tau| fit_replicate(&resample, m, tau).ok()).collect())
                .collect()
        })
        .collect();
    let mut fits = vec![vec![Vec::with_capacity(plan.replicates); taus.len()]; methods.len()];
    for rep in per_rep {
        for (m, by_tau) in rep.into_iter().enumerate() {
            for (t, f) in by_tau.into_iter().enumerate() {
                fits[m][t].push(f);
            }
        }
    }
    Ok(SharedBootstrap { methods: methods.to_vec(), taus: taus.to_vec(), names, fits })
}
