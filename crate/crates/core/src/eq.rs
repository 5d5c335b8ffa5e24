//! Gaussian linear model on empirical cell quantiles.
//!
//! Every (group, year, covariates) cell contributes its empirical
//! `tau`-quantile as a response. With `weighted = true` the cell's
//! log-density is multiplied by its member count so every individual
//! counts equally; otherwise every cell counts once.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::dataset::CellTable;
use crate::linalg::{check_full_rank, weighted_least_squares};
use crate::qr::check_tau;
use crate::{Error, Result};

/// Cell responses, weights and design `(1, year, covariates)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellDesign {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub w: DVector<f64>,
    pub names: Vec<String>,
}

pub fn cell_design(cells: &CellTable, tau: f64, weighted: bool) -> Result<CellDesign> {
    check_tau(tau)?;
    let p = cells.schema.len();
    let mut names = vec!["intercept".to_string(), "year".to_string()];
    names.extend(cells.schema.iter().map(|c| c.name.clone()));
    let n = cells.len();
    let mut x = DMatrix::zeros(n, p + 2);
    let mut y = DVector::zeros(n);
    let mut w = DVector::zeros(n);
    for (i, c) in cells.cells.iter().enumerate() {
        x[(i, 0)] = 1.0;
        x[(i, 1)] = c.year as f64;
        for (k, v) in c.covariates.iter().enumerate() {
            x[(i, 2 + k)] = *v;
        }
        y[i] = c.quantile(tau)?;
        w[i] = if weighted { c.weight() as f64 } else { 1.0 };
    }
    Ok(CellDesign { x, y, w, names })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EqFit {
    pub tau: f64,
    pub beta: Vec<f64>,
    pub names: Vec<String>,
    /// Weighted mean squared residual, normalized by the weight total.
    pub sigma2: f64,
    pub weighted: bool,
    /// Weighted Gaussian log-likelihood at the fit; `None` when degenerate.
    pub loglik: Option<f64>,
    /// Cells lie exactly on the fitted plane.
    pub degenerate: bool,
    pub n_cells: usize,
}

/// `sum_c w_c log N(y_c; x_c beta, sigma2)`.
pub fn eq_loglik(d: &CellDesign, beta: &[f64], sigma2: f64) -> f64 {
    let fitted = &d.x * DVector::from_column_slice(beta);
    let mut ll = 0.0;
    for i in 0..d.y.len() {
        let r = d.y[i] - fitted[i];
        ll += d.w[i] * (-0.5 * (2.0 * PI * sigma2).ln() - r * r / (2.0 * sigma2));
    }
    ll
}

pub fn fit_eq(cells: &CellTable, tau: f64, weighted: bool) -> Result<EqFit> {
    let d = cell_design(cells, tau, weighted)?;
    let mut fit = fit_eq_design(&d)?;
    fit.tau = tau;
    fit.weighted = weighted;
    Ok(fit)
}

/// Weighted least squares on an explicit cell design. `tau` and `weighted`
/// of the result are left for the caller to fill.
pub fn fit_eq_design(d: &CellDesign) -> Result<EqFit> {
    let (n, p) = (d.x.nrows(), d.x.ncols());
    if n <= p {
        return Err(Error::Size(format!("{n} cells for {p} coefficients; need more cells than columns")));
    }
    if d.w.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::Precondition("cell weights must be positive".into()));
    }
    check_full_rank(&d.x, &d.names)?;
    let beta = weighted_least_squares(&d.x, &d.y, &d.w)?;
    let r = &d.y - &d.x * &beta;
    let wsum: f64 = d.w.sum();
    let sigma2 = r.iter().zip(d.w.iter()).map(|(r, w)| w * r * r).sum::<f64>() / wsum;
    let scale = d.y.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let degenerate = sigma2 <= 1e-26 * (1.0 + scale);
    let beta: Vec<f64> = beta.iter().copied().collect();
    let (sigma2, loglik) = if degenerate {
        (0.0, None)
    } else {
        (sigma2, Some(eq_loglik(d, &beta, sigma2)))
    };
    Ok(EqFit {
        tau: f64::NAN,
        beta,
        names: d.names.clone(),
        sigma2,
        weighted: true,
        loglik,
        degenerate,
        n_cells: n,
    })
}
