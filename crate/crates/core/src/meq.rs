//! Mixed-effects model on empirical cell quantiles.
//!
//! Each group's cell quantiles follow `y_c = x_c beta + z_c u_i + e_c` with
//! `z_c = (1, year)`, `u_i ~ N(0, Psi)` and `e_c ~ N(0, sigma^2 / w_c)`.
//! The per-group marginal is Gaussian with covariance
//! `Z Psi Z' + sigma^2 W^-1`, evaluated here through 2x2 Woodbury updates so a
//! likelihood evaluation only touches per-group sufficient statistics.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::dataset::CellTable;
use crate::eq::{cell_design, CellDesign};
use crate::linalg::{
    check_full_rank, floor_eigen2, log_cholesky_from_psi, psd_cholesky2, psi_from_log_cholesky, weighted_least_squares,
};
use crate::optim::{default_max_iter, nelder_mead_restarts};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedParams {
    pub beta: Vec<f64>,
    /// Random intercept / year-slope covariance.
    pub psi: [[f64; 2]; 2],
    /// Residual scale: `sigma` of the cell model, `sigma_eps` of the AL model.
    pub sigma: f64,
    pub tau: f64,
}

impl MixedParams {
    pub fn psi_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.psi[0][0], self.psi[0][1], self.psi[1][0], self.psi[1][1])
    }

    pub fn set_psi(&mut self, m: &Matrix2<f64>) {
        self.psi = [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]];
    }

    /// Symmetric, nonnegative eigenvalues, positive scale.
    pub fn validate(&self) -> Result<()> {
        let m = self.psi_matrix();
        let asym = (m[(0, 1)] - m[(1, 0)]).abs();
        if asym > 1e-12 * (1.0 + m.amax()) {
            return Err(Error::Precondition("random-effect covariance is not symmetric".into()));
        }
        let ev = m.symmetric_eigenvalues();
        if ev.min() < -1e-12 * (1.0 + m.amax()) {
            return Err(Error::Precondition("random-effect covariance is not positive semidefinite".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Precondition(format!("scale {} must be positive", self.sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Ml,
    #[default]
    Reml,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum PsiMode {
    #[default]
    Estimate,
    Fixed([[f64; 2]; 2]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeqOptions {
    pub criterion: Criterion,
    pub psi: PsiMode,
    /// Map cell counts to weights (otherwise every cell has weight 1).
    pub weighted: bool,
}

impl Default for MeqOptions {
    fn default() -> Self {
        Self { criterion: Criterion::Reml, psi: PsiMode::Estimate, weighted: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeqFit {
    pub params: MixedParams,
    pub names: Vec<String>,
    pub groups: Vec<String>,
    pub loglik: f64,
    pub criterion: Criterion,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RanefMethod {
    ConditionalMode,
    Blup,
}

/// Predicted (intercept, slope) deviations, one row per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RanefMatrix {
    pub groups: Vec<String>,
    pub rows: Vec<[f64; 2]>,
    pub method: RanefMethod,
    /// The covariance used was singular (within 1e-10 of its trace).
    pub psi_singular: bool,
}

impl RanefMatrix {
    pub fn zeros(groups: Vec<String>, method: RanefMethod) -> Self {
        let rows = vec![[0.0; 2]; groups.len()];
        Self { groups, rows, method, psi_singular: false }
    }
}

/// Weighted sufficient statistics of one group.
#[derive(Debug, Clone)]
struct GroupStats {
    n: usize,
    sum_log_w: f64,
    sxx: DMatrix<f64>,
    sxz: DMatrix<f64>,
    szz: Matrix2<f64>,
    sxy: DVector<f64>,
    szy: Vector2<f64>,
    syy: f64,
}

/// Cell design split into contiguous groups.
#[derive(Debug, Clone)]
pub struct GroupedCells {
    pub design: CellDesign,
    pub groups: Vec<(String, std::ops::Range<usize>)>,
}

impl GroupedCells {
    pub fn new(cells: &CellTable, tau: f64, weighted: bool) -> Result<Self> {
        let design = cell_design(cells, tau, weighted)?;
        Ok(Self { design, groups: cells.groups() })
    }

    fn stats(&self) -> Vec<GroupStats> {
        let d = &self.design;
        let p = d.x.ncols();
        self.groups
            .iter()
            .map(|(_, r)| {
                let mut s = GroupStats {
                    n: r.len(),
                    sum_log_w: 0.0,
                    sxx: DMatrix::zeros(p, p),
                    sxz: DMatrix::zeros(p, 2),
                    szz: Matrix2::zeros(),
                    sxy: DVector::zeros(p),
                    szy: Vector2::zeros(),
                    syy: 0.0,
                };
                for i in r.clone() {
                    let w = d.w[i];
                    let z = Vector2::new(1.0, d.x[(i, 1)]);
                    let y = d.y[i];
                    s.sum_log_w += w.ln();
                    s.szz += z * z.transpose() * w;
                    s.szy += z * (w * y);
                    s.syy += w * y * y;
                    for a in 0..p {
                        let xa = d.x[(i, a)] * w;
                        s.sxy[a] += xa * y;
                        s.sxz[(a, 0)] += xa * z[0];
                        s.sxz[(a, 1)] += xa * z[1];
                        for b in 0..p {
                            s.sxx[(a, b)] += xa * d.x[(i, b)];
                        }
                    }
                }
                s
            })
            .collect()
    }

    fn check(&self, min_groups: usize) -> Result<()> {
        if self.groups.len() < min_groups {
            return Err(Error::Precondition(format!(
                "mixed model needs at least {min_groups} groups, got {}",
                self.groups.len()
            )));
        }
        for (g, r) in &self.groups {
            if r.len() < 3 {
                return Err(Error::design(format!("group `{g}` has {} cells; need at least 3", r.len()), vec![g.clone()]));
            }
            let years = &self.design.x.column(1).rows(r.start, r.len()).into_owned();
            if years.iter().all(|t| *t == years[0]) {
                return Err(Error::design(format!("group `{g}` spans a single year"), vec![g.clone()]));
            }
        }
        check_full_rank(&self.design.x, &self.design.names)
    }
}

/// Per-evaluation products `X'V^-1X`, `X'V^-1y`, `y'V^-1y`, `log|V|` summed over groups.
struct Marginal {
    xvx: DMatrix<f64>,
    xvy: DVector<f64>,
    yvy: f64,
    logdet: f64,
    n: usize,
}

fn marginal(stats: &[GroupStats], l: &Matrix2<f64>, sigma2: f64) -> Option<Marginal> {
    let p = stats.first()?.sxx.nrows();
    let mut m = Marginal { xvx: DMatrix::zeros(p, p), xvy: DVector::zeros(p), yvy: 0.0, logdet: 0.0, n: 0 };
    let l_dyn = DMatrix::from_column_slice(2, 2, l.as_slice());
    for s in stats {
        let mm = Matrix2::identity() + l.transpose() * s.szz * l / sigma2;
        let chol = mm.cholesky()?;
        let logdet_m = 2.0 * chol.l().diagonal().map(|v| v.ln()).sum();
        // U'R^-1 a = L' Z'W a / sigma2
        let ux = (&s.sxz * &l_dyn) / sigma2; // p x 2, rows are (L'Z'W x_col)'
        let uy = l.transpose() * s.szy / sigma2;
        let minv = chol.inverse();
        let minv_dyn = DMatrix::from_column_slice(2, 2, minv.as_slice());
        m.xvx += &s.sxx / sigma2 - &ux * &minv_dyn * ux.transpose();
        let uy_dyn = DVector::from_column_slice(uy.as_slice());
        m.xvy += &s.sxy / sigma2 - &ux * (&minv_dyn * &uy_dyn);
        m.yvy += s.syy / sigma2 - (uy.transpose() * minv * uy)[(0, 0)];
        m.logdet += s.n as f64 * sigma2.ln() - s.sum_log_w + logdet_m;
        m.n += s.n;
    }
    Some(m)
}

/// Log-likelihood with `beta` profiled out by GLS; returns `(value, beta)`.
fn profiled(stats: &[GroupStats], l: &Matrix2<f64>, sigma2: f64, criterion: Criterion) -> Option<(f64, DVector<f64>)> {
    let m = marginal(stats, l, sigma2)?;
    let p = m.xvx.nrows();
    let chol = m.xvx.clone().cholesky()?;
    let beta = chol.solve(&m.xvy);
    let q = m.yvy - beta.dot(&m.xvy);
    let nf = m.n as f64;
    let value = match criterion {
        Criterion::Ml => -0.5 * (nf * (2.0 * PI).ln() + m.logdet + q),
        Criterion::Reml => {
            let logdet_x = 2.0 * chol.l().diagonal().map(|v| v.ln()).sum();
            -0.5 * ((nf - p as f64) * (2.0 * PI).ln() + m.logdet + logdet_x + q)
        }
    };
    value.is_finite().then_some((value, beta))
}

/// Marginal log-likelihood at explicit parameters (no profiling).
pub fn meq_loglik(params: &MixedParams, cells: &GroupedCells, criterion: Criterion) -> Result<f64> {
    params.validate()?;
    let stats = cells.stats();
    let l = psd_cholesky2(&params.psi_matrix());
    let sigma2 = params.sigma * params.sigma;
    let m = marginal(&stats, &l, sigma2).ok_or_else(|| Error::Numerical("marginal covariance factorization failed".into()))?;
    let beta = DVector::from_column_slice(&params.beta);
    let q = m.yvy - 2.0 * beta.dot(&m.xvy) + (beta.transpose() * &m.xvx * &beta)[(0, 0)];
    let nf = m.n as f64;
    let p = beta.len() as f64;
    Ok(match criterion {
        Criterion::Ml => -0.5 * (nf * (2.0 * PI).ln() + m.logdet + q),
        Criterion::Reml => {
            let chol = m.xvx.cholesky().ok_or_else(|| Error::Numerical("X'V^-1X is singular".into()))?;
            let logdet_x = 2.0 * chol.l().diagonal().map(|v| v.ln()).sum();
            -0.5 * ((nf - p) * (2.0 * PI).ln() + m.logdet + logdet_x + q)
        }
    })
}

/// Deterministic start: pooled WLS `beta`, per-group deviation covariance.
fn start(cells: &GroupedCells) -> Result<(Vec<f64>, Matrix2<f64>, f64)> {
    let d = &cells.design;
    let beta = weighted_least_squares(&d.x, &d.y, &d.w)?;
    let r = &d.y - &d.x * &beta;
    let n = d.y.len() as f64;
    let sigma2 = (r.iter().zip(d.w.iter()).map(|(r, w)| w * r * r).sum::<f64>() / n).max(1e-12);
    let mut devs = Vec::new();
    for (_, range) in &cells.groups {
        let z = DMatrix::from_fn(range.len(), 2, |i, j| if j == 0 { 1.0 } else { d.x[(range.start + i, 1)] });
        let rr = DVector::from_fn(range.len(), |i, _| r[range.start + i]);
        let ww = DVector::from_fn(range.len(), |i, _| d.w[range.start + i]);
        if let Ok(u) = weighted_least_squares(&z, &rr, &ww) {
            devs.push(Vector2::new(u[0], u[1]));
        }
    }
    let mut cov = Matrix2::zeros();
    if devs.len() >= 2 {
        let mean = devs.iter().sum::<Vector2<f64>>() / devs.len() as f64;
        for u in &devs {
            cov += (u - mean) * (u - mean).transpose();
        }
        cov /= (devs.len() - 1) as f64;
    }
    let floor = 1e-3 * (sigma2 / d.w.mean()).max(1e-8);
    Ok((beta.iter().copied().collect(), floor_eigen2(&cov, floor), sigma2))
}

pub fn fit_meq(cells: &CellTable, tau: f64, opts: &MeqOptions) -> Result<MeqFit> {
    let grouped = GroupedCells::new(cells, tau, opts.weighted)?;
    fit_meq_grouped(&grouped, tau, opts)
}

pub fn fit_meq_grouped(cells: &GroupedCells, tau: f64, opts: &MeqOptions) -> Result<MeqFit> {
    let min_groups = match opts.psi {
        PsiMode::Estimate => 2,
        PsiMode::Fixed(_) => 1,
    };
    cells.check(min_groups)?;
    let stats = cells.stats();
    let (_, psi0, sigma2_0) = start(cells)?;
    let criterion = opts.criterion;

    let (theta_len, fixed_l) = match opts.psi {
        PsiMode::Estimate => (4, None),
        PsiMode::Fixed(psi) => {
            let m = Matrix2::new(psi[0][0], psi[0][1], psi[1][0], psi[1][1]);
            (1, Some(psd_cholesky2(&m)))
        }
    };
    let unpack = |theta: &[f64]| -> (Matrix2<f64>, f64) {
        match fixed_l {
            Some(l) => (l, (2.0 * theta[0]).exp()),
            None => {
                let (_, l) = psi_from_log_cholesky(&theta[..3]);
                (l, (2.0 * theta[3]).exp())
            }
        }
    };
    let objective = |theta: &[f64]| -> f64 {
        let (l, s2) = unpack(theta);
        profiled(&stats, &l, s2, criterion).map_or(f64::INFINITY, |(v, _)| -v)
    };

    let mut x0 = Vec::with_capacity(theta_len);
    if fixed_l.is_none() {
        x0.extend(log_cholesky_from_psi(&psi0, 0.0));
    }
    x0.push(0.5 * sigma2_0.ln());
    let f0 = objective(&x0);
    if !f0.is_finite() {
        return Err(Error::NonFinite("mixed-model likelihood is not finite at the starting values".into()));
    }
    let tol = 1e-10 * (1.0 + f0.abs());
    let res = nelder_mead_restarts(objective, &x0, tol, default_max_iter(theta_len), 10)?;
    let (l, s2) = unpack(&res.argmin);
    let (value, beta) = profiled(&stats, &l, s2, criterion)
        .ok_or_else(|| Error::solver("likelihood not finite at the final iterate", Some(res.argmin.clone())))?;
    if !res.converged {
        return Err(Error::solver(
            format!("Nelder-Mead stopped ({:?}) after {} iterations", res.termination, res.iterations),
            Some(res.argmin),
        ));
    }
    let psi = l * l.transpose();
    let mut params = MixedParams { beta: beta.iter().copied().collect(), psi: [[0.0; 2]; 2], sigma: s2.sqrt(), tau };
    params.set_psi(&psi);
    Ok(MeqFit {
        params,
        names: cells.design.names.clone(),
        groups: cells.groups.iter().map(|(g, _)| g.clone()).collect(),
        loglik: value,
        criterion,
        converged: true,
        iterations: res.iterations,
    })
}

/// Conditional modes `u_i = L M^-1 L' Z'W (y - X beta) / sigma^2`, the
/// Gaussian posterior mode of each group's random effect.
pub fn predict_ranef_meq(fit: &MeqFit, cells: &GroupedCells) -> Result<RanefMatrix> {
    let params = &fit.params;
    params.validate()?;
    let psi = params.psi_matrix();
    let l = psd_cholesky2(&psi);
    let sigma2 = params.sigma * params.sigma;
    let d = &cells.design;
    if d.x.ncols() != params.beta.len() {
        return Err(Error::Mapping("fixed-effect length does not match the cell design".into()));
    }
    let resid = &d.y - &d.x * DVector::from_column_slice(&params.beta);
    let mut rows = Vec::with_capacity(cells.groups.len());
    for (g, range) in &cells.groups {
        if !fit.groups.contains(g) {
            return Err(Error::Mapping(format!("group `{g}` was not part of the fit")));
        }
        let mut szz = Matrix2::zeros();
        let mut szr = Vector2::zeros();
        for i in range.clone() {
            let z = Vector2::new(1.0, d.x[(i, 1)]);
            szz += z * z.transpose() * d.w[i];
            szr += z * (d.w[i] * resid[i]);
        }
        let mm = Matrix2::identity() + l.transpose() * szz * l / sigma2;
        let sol = mm
            .cholesky()
            .ok_or_else(|| Error::Numerical(format!("posterior system of group `{g}` is singular")))?
            .solve(&(l.transpose() * szr / sigma2));
        let u = l * sol;
        rows.push([u[0], u[1]]);
    }
    let ev = psi.symmetric_eigenvalues();
    Ok(RanefMatrix {
        groups: cells.groups.iter().map(|(g, _)| g.clone()).collect(),
        rows,
        method: RanefMethod::ConditionalMode,
        psi_singular: ev.min() <= 1e-10 * psi.trace().max(f64::MIN_POSITIVE),
    })
}
