//! Linear quantile regression by exact minimization of the pinball sum.
//!
//! The fitter solves the bounded dual linear program
//!
//! ```text
//! max  y'a   subject to  X'a = (1 - tau) X'1,  0 <= a <= 1
//! ```
//!
//! with a primal-dual interior-point method using Mehrotra
//! predictor-corrector steps (the Frisch–Newton approach). The regression
//! coefficients are the multipliers of the equality constraints. A
//! brute-force vertex enumeration ([`oracle_qr`]) is kept for verification.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::distributions::pinball;
use crate::linalg::{check_full_rank, dependent_columns, least_squares};
use crate::{Error, Result};

pub const GAP_TOL: f64 = 1e-10;
pub const MAX_ITER: usize = 100;
const STEP_FRACTION: f64 = 0.99995;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovariateSelection {
    /// Every covariate of the dataset.
    All,
    /// Only the named covariates, in the given order.
    Only(Vec<String>),
}

/// Response vector and design matrix `(1, year, covariates...)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub names: Vec<String>,
}

impl Design {
    pub fn nobs(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    pub fn residuals(&self, beta: &[f64]) -> DVector<f64> {
        &self.y - &self.x * DVector::from_column_slice(beta)
    }

    /// `sum_j rho_tau(y_j - x_j beta)`.
    pub fn pinball_sum(&self, beta: &[f64], tau: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..self.nobs() {
            let fitted: f64 = self.x.row(i).iter().zip(beta).map(|(a, b)| a * b).sum();
            total += pinball(self.y[i] - fitted, tau);
        }
        total
    }
}

pub(crate) fn covariate_indices(ds: &Dataset, sel: &CovariateSelection) -> Result<Vec<usize>> {
    let names = ds.covariate_names();
    match sel {
        CovariateSelection::All => Ok((0..names.len()).collect()),
        CovariateSelection::Only(wanted) => wanted
            .iter()
            .map(|w| {
                names
                    .iter()
                    .position(|n| n == w)
                    .ok_or_else(|| Error::Schema(format!("unknown covariate `{w}`")))
            })
            .collect(),
    }
}

/// Observation-level design with columns intercept, year, selected covariates.
pub fn observation_design(ds: &Dataset, sel: &CovariateSelection) -> Result<Design> {
    let idx = covariate_indices(ds, sel)?;
    let schema = ds.schema();
    let mut names = vec!["intercept".to_string(), "year".to_string()];
    names.extend(idx.iter().map(|&k| schema[k].name.clone()));
    let n = ds.len();
    let p = names.len();
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    for (i, obs) in ds.observations().iter().enumerate() {
        x[(i, 0)] = 1.0;
        x[(i, 1)] = obs.year as f64;
        for (c, &k) in idx.iter().enumerate() {
            x[(i, 2 + c)] = obs.covariates[k];
        }
        y[i] = obs.day;
    }
    Ok(Design { x, y, names })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QrSolver {
    InteriorPoint,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileFit {
    pub tau: f64,
    pub beta: Vec<f64>,
    pub names: Vec<String>,
    /// Attained pinball sum, recomputed from the data at `beta`.
    pub objective: f64,
    pub solver: QrSolver,
    pub dual_feasible: bool,
    pub iterations: usize,
    /// Final duality gap (zero for the oracle).
    pub gap: f64,
}

/// Counts `(#{r < 0}, #{r <= 0})`, treating `|r| <= zero_tol` as zero.
pub fn residual_sign_counts(residuals: &DVector<f64>, zero_tol: f64) -> (usize, usize) {
    let neg = residuals.iter().filter(|&&r| r < -zero_tol).count();
    let nonpos = residuals.iter().filter(|&&r| r <= zero_tol).count();
    (neg, nonpos)
}

/// Zero threshold for residuals of an interior-point fit on `design`.
pub fn residual_zero_tol(design: &Design) -> f64 {
    1e-7 * (1.0 + design.y.amax())
}

fn check_design(design: &Design) -> Result<()> {
    let (n, p) = (design.nobs(), design.ncols());
    if n < p {
        return Err(Error::Size(format!("{n} observations for {p} coefficients")));
    }
    if design.y.iter().any(|v| !v.is_finite()) || design.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("design contains non-finite values".into()));
    }
    check_full_rank(&design.x, &design.names)
}

/// Fits the `tau`-quantile regression of day on (1, year, covariates).
pub fn fit_qr(ds: &Dataset, tau: f64, sel: &CovariateSelection) -> Result<QuantileFit> {
    let design = observation_design(ds, sel)?;
    fit_design(&design, tau)
}

/// Interior-point quantile regression on an explicit design.
pub fn fit_design(design: &Design, tau: f64) -> Result<QuantileFit> {
    check_tau(tau)?;
    check_design(design)?;
    let sol = interior_point(&design.x, &design.y, tau)?;
    let objective = design.pinball_sum(&sol.beta, tau);
    Ok(QuantileFit {
        tau,
        beta: sol.beta,
        names: design.names.clone(),
        objective,
        solver: QrSolver::InteriorPoint,
        dual_feasible: sol.dual_feasible,
        iterations: sol.iterations,
        gap: sol.gap,
    })
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::Precondition(format!("quantile level {tau} outside (0, 1)")))
    }
}

struct IpmSolution {
    beta: Vec<f64>,
    iterations: usize,
    gap: f64,
    dual_feasible: bool,
}

/// Largest `alpha` in (0, inf) keeping `v + alpha dv >= 0`.
fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, &d)| d < 0.0)
        .map(|(&vi, &d)| -vi / d)
        .fold(f64::INFINITY, f64::min)
}

fn interior_point(xm: &DMatrix<f64>, y: &DVector<f64>, tau: f64) -> Result<IpmSolution> {
    let (n, p) = (xm.nrows(), xm.ncols());
    let nf = n as f64;

    // LP data: min c'x, A x = b, 0 <= x <= 1, with A = X', c = -y.
    let c: Vec<f64> = y.iter().map(|v| -v).collect();
    let b: DVector<f64> = xm.transpose() * DVector::from_element(n, 1.0 - tau);

    let mut x = vec![1.0 - tau; n];
    let mut s = vec![tau; n];
    let beta_ls = least_squares(xm, y)?;
    let mut lambda: DVector<f64> = -beta_ls;
    let xl = xm * &lambda;
    let r0: Vec<f64> = (0..n).map(|i| c[i] - xl[i]).collect();
    let shift = 1e-2 * (r0.iter().map(|v| v.abs()).sum::<f64>() / nf) + 1e-3 * (1.0 + y.amax());
    let mut z: Vec<f64> = r0.iter().map(|&r| r.max(0.0) + shift).collect();
    let mut w: Vec<f64> = r0.iter().map(|&r| (-r).max(0.0) + shift).collect();

    let scale_y = 1.0 + y.amax();
    let scale_b = 1.0 + b.amax();
    let mut best: Option<(f64, Vec<f64>)> = None;

    let mut q = vec![0.0; n];
    let mut gap = f64::INFINITY;
    for iter in 0..=MAX_ITER {
        // residuals of the equality constraints
        let ax = xm.tr_mul(&DVector::from_column_slice(&x));
        let rp = &b - &ax;
        let atl = xm * &lambda;
        let rd: Vec<f64> = (0..n).map(|i| c[i] - atl[i] - z[i] + w[i]).collect();
        gap = x.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>()
            + s.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();

        let beta: Vec<f64> = lambda.iter().map(|v| -v).collect();
        let obj = pinball_sum_raw(xm, y, &beta, tau);
        if best.as_ref().is_none_or(|(o, _)| obj < *o) {
            best = Some((obj, beta.clone()));
        }
        let rp_ok = rp.amax() <= 1e-9 * scale_b;
        let rd_ok = rd.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= 1e-9 * scale_y;
        if gap <= GAP_TOL * (1.0 + obj.abs()) && rp_ok && rd_ok {
            return Ok(IpmSolution {
                beta,
                iterations: iter,
                gap,
                dual_feasible: z.iter().chain(&w).all(|v| *v >= 0.0),
            });
        }
        if iter == MAX_ITER {
            break;
        }

        for i in 0..n {
            q[i] = 1.0 / (z[i] / x[i] + w[i] / s[i]);
        }
        let mut aqa = DMatrix::<f64>::zeros(p, p);
        for i in 0..n {
            let row = xm.row(i);
            for a in 0..p {
                let ra = q[i] * row[a];
                for bb in a..p {
                    aqa[(a, bb)] += ra * row[bb];
                }
            }
        }
        for a in 0..p {
            for bb in 0..a {
                aqa[(a, bb)] = aqa[(bb, a)];
            }
        }
        let chol = match aqa.clone().cholesky() {
            Some(ch) => ch,
            None => {
                // fall back to a tiny ridge when the normal matrix loses definiteness
                let ridge = 1e-14 * aqa.diagonal().amax().max(1e-300);
                match (aqa + DMatrix::identity(p, p) * ridge).cholesky() {
                    Some(ch) => ch,
                    None => break,
                }
            }
        };

        // Solve for a direction given complementarity targets rc1 (x z) and rc2 (s w).
        let solve = |rc1: &[f64], rc2: &[f64]| -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, DVector<f64>) {
            let h: Vec<f64> = (0..n).map(|i| rc1[i] / x[i] - rc2[i] / s[i] - rd[i]).collect();
            let qh = DVector::from_iterator(n, (0..n).map(|i| q[i] * h[i]));
            let rhs = &rp - xm.tr_mul(&qh);
            let dl = chol.solve(&rhs);
            let adl = xm * &dl;
            let dx: Vec<f64> = (0..n).map(|i| q[i] * (adl[i] + h[i])).collect();
            let ds: Vec<f64> = dx.iter().map(|v| -v).collect();
            let dz: Vec<f64> = (0..n).map(|i| (rc1[i] - z[i] * dx[i]) / x[i]).collect();
            let dw: Vec<f64> = (0..n).map(|i| (rc2[i] - w[i] * ds[i]) / s[i]).collect();
            (dx, ds, dz, dw, dl)
        };
        let steps = |dx: &[f64], ds: &[f64], dz: &[f64], dw: &[f64]| -> (f64, f64) {
            let ap = (STEP_FRACTION * max_step(&x, dx).min(max_step(&s, ds))).min(1.0);
            let ad = (STEP_FRACTION * max_step(&z, dz).min(max_step(&w, dw))).min(1.0);
            (ap, ad)
        };

        // predictor
        let rc1: Vec<f64> = (0..n).map(|i| -x[i] * z[i]).collect();
        let rc2: Vec<f64> = (0..n).map(|i| -s[i] * w[i]).collect();
        let (dxa, dsa, dza, dwa, _) = solve(&rc1, &rc2);
        let (apa, ada) = steps(&dxa, &dsa, &dza, &dwa);
        let mu = gap / (2.0 * nf);
        let mu_aff = (0..n)
            .map(|i| {
                (x[i] + apa * dxa[i]) * (z[i] + ada * dza[i]) + (s[i] + apa * dsa[i]) * (w[i] + ada * dwa[i])
            })
            .sum::<f64>()
            / (2.0 * nf);
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

        // corrector
        let target = sigma * mu;
        let rc1: Vec<f64> = (0..n).map(|i| target - x[i] * z[i] - dxa[i] * dza[i]).collect();
        let rc2: Vec<f64> = (0..n).map(|i| target - s[i] * w[i] - dsa[i] * dwa[i]).collect();
        let (dx, ds, dz, dw, dl) = solve(&rc1, &rc2);
        let (ap, ad) = steps(&dx, &ds, &dz, &dw);

        for i in 0..n {
            x[i] += ap * dx[i];
            s[i] += ap * ds[i];
            z[i] += ad * dz[i];
            w[i] += ad * dw[i];
        }
        lambda += dl * ad;
        if !(ap.is_finite() && ad.is_finite()) || lambda.iter().any(|v| !v.is_finite()) {
            break;
        }
    }
    Err(Error::solver(
        format!("interior point stopped after {MAX_ITER} iterations with duality gap {gap:e}"),
        best.map(|(_, b)| b),
    ))
}

fn pinball_sum_raw(xm: &DMatrix<f64>, y: &DVector<f64>, beta: &[f64], tau: f64) -> f64 {
    let fitted = xm * DVector::from_column_slice(beta);
    y.iter().zip(fitted.iter()).map(|(yi, fi)| pinball(yi - fi, tau)).sum()
}

pub const ORACLE_MAX_OBS: usize = 14;
pub const ORACLE_MAX_COLS: usize = 4;

/// Exhaustive search over all exact-fit hyperplanes through `p` observations.
pub fn oracle_qr(ds: &Dataset, tau: f64, sel: &CovariateSelection) -> Result<QuantileFit> {
    let design = observation_design(ds, sel)?;
    oracle_design(&design, tau)
}

pub fn oracle_design(design: &Design, tau: f64) -> Result<QuantileFit> {
    check_tau(tau)?;
    let (n, p) = (design.nobs(), design.ncols());
    if n > ORACLE_MAX_OBS || p > ORACLE_MAX_COLS {
        return Err(Error::Refused(format!(
            "oracle limited to {ORACLE_MAX_OBS} observations and {ORACLE_MAX_COLS} columns, got {n} x {p}"
        )));
    }
    if n < p {
        return Err(Error::Size(format!("{n} observations for {p} coefficients")));
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut subset: Vec<usize> = (0..p).collect();
    loop {
        let xs = DMatrix::from_fn(p, p, |i, j| design.x[(subset[i], j)]);
        let ys = DVector::from_fn(p, |i, _| design.y[subset[i]]);
        if dependent_columns(&xs).is_empty() {
            if let Some(b) = xs.lu().solve(&ys) {
                let beta: Vec<f64> = b.iter().copied().collect();
                let obj = design.pinball_sum(&beta, tau);
                if best.as_ref().is_none_or(|(o, _)| obj < *o) {
                    best = Some((obj, beta));
                }
            }
        }
        if !next_combination(&mut subset, n) {
            break;
        }
    }
    let (objective, beta) = best.ok_or_else(|| {
        Error::design("no nonsingular basis found; design is rank deficient", design.names.clone())
    })?;
    Ok(QuantileFit {
        tau,
        beta,
        names: design.names.clone(),
        objective,
        solver: QrSolver::Oracle,
        dual_feasible: true,
        iterations: 0,
        gap: 0.0,
    })
}

/// Advances `c` to the next k-combination of 0..n in lexicographic order.
fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    for i in (0..k).rev() {
        if c[i] < n - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Quantile line of one group from the interaction model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLine {
    pub group: String,
    pub intercept: f64,
    pub slope: f64,
    /// Offsets relative to the baseline group (zero for the baseline).
    pub intercept_offset: f64,
    pub slope_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionFit {
    pub baseline: String,
    pub fit: QuantileFit,
    pub groups: Vec<GroupLine>,
}

/// Design with a common intercept and year slope plus, for every group
/// after the first (the baseline), an intercept offset and year-slope offset.
pub fn interaction_design(ds: &Dataset) -> Result<(Design, Vec<String>)> {
    let groups = ds.groups();
    if groups.is_empty() {
        return Err(Error::Precondition("empty dataset".into()));
    }
    for (g, range) in &groups {
        let obs = &ds.observations()[range.clone()];
        if obs.iter().all(|o| o.year == obs[0].year) {
            return Err(Error::design(
                format!("group `{g}` spans a single year; its slope offset is unidentifiable"),
                vec![g.clone()],
            ));
        }
    }
    let m = groups.len();
    let mut names = vec!["intercept".to_string(), "year".to_string()];
    for (g, _) in groups.iter().skip(1) {
        names.push(format!("intercept:{g}"));
        names.push(format!("year:{g}"));
    }
    let n = ds.len();
    let mut x = DMatrix::zeros(n, 2 * m);
    let mut y = DVector::zeros(n);
    for (k, (_, range)) in groups.iter().enumerate() {
        for i in range.clone() {
            let obs = &ds.observations()[i];
            let t = obs.year as f64;
            x[(i, 0)] = 1.0;
            x[(i, 1)] = t;
            if k > 0 {
                x[(i, 2 * k)] = 1.0;
                x[(i, 2 * k + 1)] = t;
            }
            y[i] = obs.day;
        }
    }
    Ok((Design { x, y, names }, groups.into_iter().map(|(g, _)| g).collect()))
}

/// Quantile regression with group-by-year interactions; per-group lines are
/// the baseline coefficients plus each group's offsets.
pub fn fit_qr_interactions(ds: &Dataset, tau: f64) -> Result<InteractionFit> {
    let (design, group_names) = interaction_design(ds)?;
    let fit = fit_design(&design, tau)?;
    Ok(interaction_lines(fit, group_names))
}

pub(crate) fn interaction_lines(fit: QuantileFit, group_names: Vec<String>) -> InteractionFit {
    let (b0, bt) = (fit.beta[0], fit.beta[1]);
    let groups = group_names
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let (io, so) = if k == 0 {
                (0.0, 0.0)
            } else {
                (fit.beta[2 * k], fit.beta[2 * k + 1])
            };
            GroupLine {
                group: g.clone(),
                intercept: b0 + io,
                slope: bt + so,
                intercept_offset: io,
                slope_offset: so,
            }
        })
        .collect();
    InteractionFit {
        baseline: group_names[0].clone(),
        fit,
        groups,
    }
}
