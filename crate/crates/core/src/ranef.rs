//! Best linear prediction of the quantile mixed model's group effects.
//!
//! For one group with observations ordered by year, the response covariance
//! is `Sigma = Z Psi Z' + sigma_eps I`. Its block (s, t) for years s and t
//! is `b_st 1 1' (+ sigma_eps I on the diagonal)` with
//! `b_st = psi11 + psi12 (s + t) + psi22 s t`. The inverse has the same
//! pattern, `Sigma^-1 = C + delta I` with constant blocks `c_st` and
//! `delta = 1 / sigma_eps`, where the T x T matrix of the `c_st` solves
//! `(B N + sigma_eps I) C = -delta B`. The block and sequential modes below
//! only ever touch T x T matrices and length-n vectors.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::distributions::al_mean_offset;
use crate::lqmm::LqmmFit;
use crate::meq::{MixedParams, RanefMatrix, RanefMethod};
use crate::qr::{observation_design, CovariateSelection};
use crate::{Error, Result};

/// Largest group size the dense mode accepts.
pub const DENSE_MAX_OBS: usize = 2000;

/// Mean of AL(0, sigma_eps, tau), the centering term of the residuals.
pub fn al_mean_correction(sigma_eps: f64, tau: f64) -> f64 {
    al_mean_offset(sigma_eps, tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlupMode {
    Dense,
    Block,
    Sequential,
}

impl std::str::FromStr for BlupMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Self::Dense),
            "block" => Ok(Self::Block),
            "sequential" => Ok(Self::Sequential),
            other => Err(Error::Config(format!("unknown mode `{other}` (dense, block, sequential)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCovariance {
    pub years: Vec<f64>,
    pub b_check: DMatrix<f64>,
    /// Per-year counts, the diagonal of N.
    pub n_check: Vec<f64>,
    pub sigma_eps: f64,
    pub delta_eps: f64,
    pub c_check: DMatrix<f64>,
}

impl BlockCovariance {
    /// `B N C`, the off-diagonal block pattern of `B C`.
    pub fn a_check(&self) -> DMatrix<f64> {
        let n = DMatrix::from_diagonal(&DVector::from_column_slice(&self.n_check));
        &self.b_check * n * &self.c_check
    }

    /// The same blocks recovered from `B C + delta B + sigma_eps C = 0`.
    pub fn a_check_from_parts(&self) -> DMatrix<f64> {
        -(&self.b_check * self.delta_eps) - &self.c_check * self.sigma_eps
    }

    /// `C` recomputed from the stored `B`, `N` and `sigma_eps`.
    pub fn recompute_c(&self) -> Result<DMatrix<f64>> {
        c_from_parts(&self.b_check, &self.n_check, self.sigma_eps)
    }

    /// Total observation count.
    pub fn nobs(&self) -> usize {
        self.n_check.iter().sum::<f64>() as usize
    }

    /// Dense `n x n` covariance; verification only.
    pub fn dense_sigma(&self, psi: &Matrix2<f64>) -> DMatrix<f64> {
        let z = self.dense_z();
        let psi_d = DMatrix::from_column_slice(2, 2, psi.as_slice());
        let n = z.nrows();
        &z * psi_d * z.transpose() + DMatrix::identity(n, n) * self.sigma_eps
    }

    /// Dense `n x n` inverse assembled from the blocks; verification only.
    pub fn dense_inverse(&self) -> DMatrix<f64> {
        let idx = self.year_index();
        let n = idx.len();
        DMatrix::from_fn(n, n, |i, j| self.c_check[(idx[i], idx[j])] + if i == j { self.delta_eps } else { 0.0 })
    }

    fn year_index(&self) -> Vec<usize> {
        self.n_check
            .iter()
            .enumerate()
            .flat_map(|(s, &n)| std::iter::repeat_n(s, n as usize))
            .collect()
    }

    fn dense_z(&self) -> DMatrix<f64> {
        let idx = self.year_index();
        DMatrix::from_fn(idx.len(), 2, |i, j| if j == 0 { 1.0 } else { self.years[idx[i]] })
    }
}

fn c_from_parts(b: &DMatrix<f64>, counts: &[f64], sigma_eps: f64) -> Result<DMatrix<f64>> {
    let t = counts.len();
    let mut k = b.clone();
    for s in 0..t {
        for r in 0..t {
            k[(r, s)] *= counts[s];
        }
        k[(s, s)] += sigma_eps;
    }
    let lu = k.lu();
    let c = lu
        .solve(&(b * (-1.0 / sigma_eps)))
        .ok_or_else(|| Error::Numerical("reduced block system is singular".into()))?;
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("reduced block system is singular".into()));
    }
    Ok(c)
}

/// Reduced T x T description of `Sigma^-1` for one group.
pub fn reduced_inverse(psi: &Matrix2<f64>, sigma_eps: f64, year_counts: &[usize], year_values: &[f64]) -> Result<BlockCovariance> {
    if !(sigma_eps > 0.0 && sigma_eps.is_finite()) {
        return Err(Error::Precondition(format!("residual scale {sigma_eps} must be positive")));
    }
    if year_counts.len() != year_values.len() || year_counts.is_empty() {
        return Err(Error::Precondition("year counts and values must be nonempty and of equal length".into()));
    }
    if year_counts.contains(&0) {
        return Err(Error::Precondition("every year needs at least one observation".into()));
    }
    if (psi[(0, 1)] - psi[(1, 0)]).abs() > 1e-12 * (1.0 + psi.amax()) {
        return Err(Error::Precondition("random-effect covariance is not symmetric".into()));
    }
    let t = year_values.len();
    let (p11, p12, p22) = (psi[(0, 0)], psi[(0, 1)], psi[(1, 1)]);
    let b = DMatrix::from_fn(t, t, |s, r| {
        let (ys, yr) = (year_values[s], year_values[r]);
        p11 + p12 * (ys + yr) + p22 * ys * yr
    });
    let counts: Vec<f64> = year_counts.iter().map(|&n| n as f64).collect();
    let c = c_from_parts(&b, &counts, sigma_eps)?;
    Ok(BlockCovariance {
        years: year_values.to_vec(),
        b_check: b,
        n_check: counts,
        sigma_eps,
        delta_eps: 1.0 / sigma_eps,
        c_check: c,
    })
}

/// One group's residuals with their years, in chronological order.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupResiduals {
    pub years: Vec<f64>,
    pub residuals: Vec<f64>,
}

impl GroupResiduals {
    /// Distinct years, per-year counts and per-year residual sums.
    fn year_summary(&self) -> (Vec<f64>, Vec<usize>, Vec<f64>) {
        let mut years: Vec<f64> = Vec::new();
        let mut counts = Vec::new();
        let mut sums = Vec::new();
        for (&t, &e) in self.years.iter().zip(&self.residuals) {
            if years.last() == Some(&t) {
                *counts.last_mut().expect("nonempty") += 1;
                *sums.last_mut().expect("nonempty") += e;
            } else {
                years.push(t);
                counts.push(1);
                sums.push(e);
            }
        }
        (years, counts, sums)
    }
}

/// `Psi Z' Sigma^-1 e` for one group.
pub fn group_blup(psi: &Matrix2<f64>, sigma_eps: f64, g: &GroupResiduals, mode: BlupMode) -> Result<Vector2<f64>> {
    let n = g.residuals.len();
    if n == 0 {
        return Err(Error::Precondition("group has no observations".into()));
    }
    if g.years.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Ordering("observations are not in chronological order within the group".into()));
    }
    match mode {
        BlupMode::Dense => {
            if n > DENSE_MAX_OBS {
                return Err(Error::Refused(format!(
                    "dense mode is limited to {DENSE_MAX_OBS} observations per group, got {n}"
                )));
            }
            let z = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { g.years[i] });
            let psi_d = DMatrix::from_column_slice(2, 2, psi.as_slice());
            let sigma = &z * &psi_d * z.transpose() + DMatrix::identity(n, n) * sigma_eps;
            let e = DVector::from_column_slice(&g.residuals);
            let x = sigma
                .cholesky()
                .ok_or_else(|| Error::Numerical("response covariance is not positive definite".into()))?
                .solve(&e);
            let u = psi_d * (z.transpose() * x);
            Ok(Vector2::new(u[0], u[1]))
        }
        BlupMode::Block => {
            let (years, counts, sums) = g.year_summary();
            let bc = reduced_inverse(psi, sigma_eps, &counts, &years)?;
            let ce = &bc.c_check * DVector::from_column_slice(&sums);
            let mut zs = Vector2::zeros();
            for s in 0..years.len() {
                let z = Vector2::new(1.0, years[s]);
                zs += z * (counts[s] as f64 * ce[s] + bc.delta_eps * sums[s]);
            }
            Ok(psi * zs)
        }
        BlupMode::Sequential => {
            let (years, counts, sums) = g.year_summary();
            let bc = reduced_inverse(psi, sigma_eps, &counts, &years)?;
            let mut u = Vector2::zeros();
            for t in 0..years.len() {
                // every column of stripe W_t equals w_t
                let mut acc = Vector2::new(1.0, years[t]) * bc.delta_eps;
                for s in 0..years.len() {
                    acc += Vector2::new(1.0, years[s]) * (counts[s] as f64 * bc.c_check[(s, t)]);
                }
                u += (psi * acc) * sums[t];
            }
            Ok(u)
        }
    }
}

/// Per-group residuals `y - X beta - E[eps]` of `ds` under `params`.
pub fn residuals_by_group(params: &MixedParams, ds: &Dataset) -> Result<Vec<(String, GroupResiduals)>> {
    ds.check_ordering()?;
    let design = observation_design(ds, &CovariateSelection::All)?;
    if design.ncols() != params.beta.len() {
        return Err(Error::Mapping(format!(
            "fit has {} fixed effects, data design has {} columns",
            params.beta.len(),
            design.ncols()
        )));
    }
    let shift = al_mean_correction(params.sigma, params.tau);
    let fitted = &design.x * DVector::from_column_slice(&params.beta);
    Ok(ds
        .groups()
        .into_iter()
        .map(|(g, r)| {
            let years = r.clone().map(|i| design.x[(i, 1)]).collect();
            let residuals = r.map(|i| design.y[i] - fitted[i] - shift).collect();
            (g, GroupResiduals { years, residuals })
        })
        .collect())
}

/// Predicted random effects for every group of `fit_groups`, in that order.
pub fn blup_params(params: &MixedParams, fit_groups: &[String], ds: &Dataset, mode: BlupMode) -> Result<RanefMatrix> {
    params.validate()?;
    let resid = residuals_by_group(params, ds)?;
    let psi = params.psi_matrix();
    let mut rows = Vec::with_capacity(fit_groups.len());
    for g in fit_groups {
        let (_, gr) = resid
            .iter()
            .find(|(name, _)| name == g)
            .ok_or_else(|| Error::Mapping(format!("group `{g}` of the fit is absent from the data")))?;
        let u = group_blup(&psi, params.sigma, gr, mode)?;
        rows.push([u[0], u[1]]);
    }
    let ev = psi.symmetric_eigenvalues();
    Ok(RanefMatrix {
        groups: fit_groups.to_vec(),
        rows,
        method: RanefMethod::Blup,
        psi_singular: ev.min() <= 1e-10 * psi.trace().max(f64::MIN_POSITIVE),
    })
}

pub fn blup(fit: &LqmmFit, ds: &Dataset, mode: BlupMode) -> Result<RanefMatrix> {
    blup_params(&fit.params, &fit.groups, ds, mode)
}
