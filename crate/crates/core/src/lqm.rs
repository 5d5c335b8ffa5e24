//! Quantile regression as maximum likelihood under an asymmetric Laplace
//! error law with unit scale.
//!
//! The log-likelihood is `N log(tau (1 - tau)) - sum_j rho_tau(r_j)`, so its
//! maximizer coincides with the pinball-sum minimizer. It is optimized here
//! with general-purpose methods whose answers can be compared against the
//! exact linear-programming fit.

use serde::{Deserialize, Serialize};

use crate::dataset::{empirical_quantile, Dataset};
use crate::linalg::least_squares;
use crate::optim::{default_max_iter, gradient_search, nelder_mead_restarts, OptimResult};
use crate::qr::{check_tau, fit_design, observation_design, CovariateSelection, Design};
use crate::{Error, Result};

/// Relative objective tolerance handed to the optimizers.
pub const LQM_TOL: f64 = 1e-12;
const NM_RESTARTS: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LqmMethod {
    Gradient,
    NelderMead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqmFit {
    pub tau: f64,
    pub beta: Vec<f64>,
    pub names: Vec<String>,
    pub loglik: f64,
    pub pinball_sum: f64,
    pub method: LqmMethod,
    pub converged: bool,
    pub iterations: usize,
}

/// `N log(tau (1 - tau)) - pinball_sum`.
pub fn al_loglik(n: usize, tau: f64, pinball_sum: f64) -> f64 {
    n as f64 * (tau * (1.0 - tau)).ln() - pinball_sum
}

/// Least-squares coefficients with the intercept moved so that the
/// `tau`-quantile of the residuals is zero.
pub fn starting_values(design: &Design, tau: f64) -> Result<Vec<f64>> {
    let mut beta: Vec<f64> = least_squares(&design.x, &design.y)?.iter().copied().collect();
    let mut res: Vec<f64> = design.residuals(&beta).iter().copied().collect();
    res.sort_by(f64::total_cmp);
    beta[0] += empirical_quantile(&res, tau)?;
    Ok(beta)
}

/// Generalized gradient of the pinball sum, taking slope `tau` at zero residuals.
pub fn pinball_gradient(design: &Design, beta: &[f64], tau: f64) -> Vec<f64> {
    let r = design.residuals(beta);
    let mut g = vec![0.0; beta.len()];
    for i in 0..design.nobs() {
        let psi = if r[i] >= 0.0 { tau } else { tau - 1.0 };
        for (k, gk) in g.iter_mut().enumerate() {
            *gk -= design.x[(i, k)] * psi;
        }
    }
    g
}

pub fn fit_lqm(ds: &Dataset, tau: f64, method: LqmMethod, sel: &CovariateSelection) -> Result<LqmFit> {
    let design = observation_design(ds, sel)?;
    fit_lqm_design(&design, tau, method)
}

pub fn fit_lqm_design(design: &Design, tau: f64, method: LqmMethod) -> Result<LqmFit> {
    check_tau(tau)?;
    if design.nobs() < design.ncols() {
        return Err(Error::Size(format!(
            "{} observations for {} coefficients",
            design.nobs(),
            design.ncols()
        )));
    }
    crate::linalg::check_full_rank(&design.x, &design.names)?;
    let x0 = starting_values(design, tau)?;
    let f = |b: &[f64]| design.pinball_sum(b, tau);
    let tol = LQM_TOL * (1.0 + f(&x0));
    let max_iter = default_max_iter(x0.len());
    let res: OptimResult = match method {
        LqmMethod::NelderMead => nelder_mead_restarts(f, &x0, tol, max_iter, NM_RESTARTS)?,
        LqmMethod::Gradient => {
            gradient_search(f, |b: &[f64]| pinball_gradient(design, b, tau), &x0, tol, max_iter)?
        }
    };
    let pinball_sum = design.pinball_sum(&res.argmin, tau);
    Ok(LqmFit {
        tau,
        loglik: al_loglik(design.nobs(), tau, pinball_sum),
        beta: res.argmin,
        names: design.names.clone(),
        pinball_sum,
        method,
        converged: res.converged,
        iterations: res.iterations,
    })
}

/// Coefficient estimates of the three methods and their pairwise differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyRow {
    pub tau: f64,
    pub coefficient: String,
    pub interior_point: f64,
    pub nelder_mead: f64,
    pub gradient: f64,
    pub abs_nm_ip: f64,
    pub abs_gradient_ip: f64,
    pub abs_gradient_nm: f64,
    /// Relative to the interior-point value.
    pub rel_nm_ip: f64,
    pub rel_gradient_ip: f64,
}

fn rel_diff(a: f64, reference: f64) -> f64 {
    let d = (a - reference).abs();
    if d == 0.0 {
        0.0
    } else {
        d / reference.abs()
    }
}

pub fn discrepancy_rows(tau: f64, names: &[String], ip: &[f64], nm: &[f64], gr: &[f64]) -> Vec<DiscrepancyRow> {
    names
        .iter()
        .enumerate()
        .map(|(k, name)| DiscrepancyRow {
            tau,
            coefficient: name.clone(),
            interior_point: ip[k],
            nelder_mead: nm[k],
            gradient: gr[k],
            abs_nm_ip: (nm[k] - ip[k]).abs(),
            abs_gradient_ip: (gr[k] - ip[k]).abs(),
            abs_gradient_nm: (gr[k] - nm[k]).abs(),
            rel_nm_ip: rel_diff(nm[k], ip[k]),
            rel_gradient_ip: rel_diff(gr[k], ip[k]),
        })
        .collect()
}

/// Fits every method at every `tau` and tabulates the coefficient differences.
pub fn compare_methods(ds: &Dataset, taus: &[f64], sel: &CovariateSelection) -> Result<Vec<DiscrepancyRow>> {
    let design = observation_design(ds, sel)?;
    let mut rows = Vec::new();
    for &tau in taus {
        let ip = fit_design(&design, tau)?;
        let nm = fit_lqm_design(&design, tau, LqmMethod::NelderMead)?;
        let gr = fit_lqm_design(&design, tau, LqmMethod::Gradient)?;
        rows.extend(discrepancy_rows(tau, &design.names, &ip.beta, &nm.beta, &gr.beta));
    }
    Ok(rows)
}

/// Largest `rel_gradient_ip` in a table.
pub fn max_relative_gradient_gap(rows: &[DiscrepancyRow]) -> f64 {
    rows.iter().map(|r| r.rel_gradient_ip).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Covariate, CovariateKind, Observation};
    use crate::qr::fit_qr;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn design_from(x: nalgebra::DMatrix<f64>, y: Vec<f64>, names: Vec<String>) -> Design {
        Design { x, y: nalgebra::DVector::from_vec(y), names }
    }

    fn random_ds(seed: u64, n: usize, binary: bool) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let schema = if binary {
            vec![Covariate { name: "age".into(), kind: CovariateKind::Binary }]
        } else {
            vec![]
        };
        let obs = (0..n)
            .map(|_| {
                let t = rng.random_range(-8i64..=8);
                let a = f64::from(rng.random_range(0u8..2));
                let e: f64 = rng.random::<f64>().ln() * -6.0;
                let o = Observation::new("A", t, 120.0 - 0.4 * t as f64 + 3.0 * a + e);
                if binary {
                    o.with_covariates(vec![a])
                } else {
                    o
                }
            })
            .collect();
        Dataset::from_centered(schema, obs, 0)
    }

    #[test]
    fn nelder_mead_matches_interior_point() {
        for seed in 0..10 {
            let ds = random_ds(seed, 50, false);
            for tau in [0.1, 0.5, 0.8] {
                let q = fit_qr(&ds, tau, &CovariateSelection::All).unwrap();
                let l = fit_lqm(&ds, tau, LqmMethod::NelderMead, &CovariateSelection::All).unwrap();
                let rel = (l.pinball_sum - q.objective) / q.objective;
                assert!(rel.abs() < 1e-6, "seed {seed} tau {tau}: {rel}");
                assert!((l.loglik - al_loglik(50, tau, q.objective)).abs() < 1e-6 * q.objective);
            }
        }
    }

    #[test]
    fn loglik_identity_and_bound() {
        let ds = random_ds(3, 40, true);
        for method in [LqmMethod::NelderMead, LqmMethod::Gradient] {
            let fit = fit_lqm(&ds, 0.3, method, &CovariateSelection::All).unwrap();
            let d = observation_design(&ds, &CovariateSelection::All).unwrap();
            let recomputed = 40.0 * (0.3f64 * 0.7).ln() - d.pinball_sum(&fit.beta, 0.3);
            assert!((fit.loglik - recomputed).abs() < 1e-9);
            assert!(fit.loglik <= 40.0 * (0.3f64 * 0.7).ln());
        }
    }

    #[test]
    fn exact_interpolation_attains_bound() {
        let obs = vec![Observation::new("A", -1, 10.0), Observation::new("A", 2, 4.0)];
        let ds = Dataset::from_centered(vec![], obs, 0);
        let fit = fit_lqm(&ds, 0.4, LqmMethod::NelderMead, &CovariateSelection::All).unwrap();
        let bound = 2.0 * (0.4f64 * 0.6).ln();
        assert!((fit.loglik - bound).abs() < 1e-6, "{}", fit.loglik);
    }

    #[test]
    fn starting_values_center_residual_quantile() {
        let ds = random_ds(5, 30, false);
        let d = observation_design(&ds, &CovariateSelection::All).unwrap();
        let b = starting_values(&d, 0.25).unwrap();
        let mut r: Vec<f64> = d.residuals(&b).iter().copied().collect();
        r.sort_by(f64::total_cmp);
        assert!(empirical_quantile(&r, 0.25).unwrap().abs() < 1e-9);
    }

    #[test]
    fn gradient_convention_at_zero_residual() {
        let d = design_from(nalgebra::DMatrix::from_element(1, 1, 1.0), vec![2.0], vec!["intercept".into()]);
        // residual exactly zero takes slope tau
        assert_eq!(pinball_gradient(&d, &[2.0], 0.3), vec![-0.3]);
        assert!((pinball_gradient(&d, &[3.0], 0.3)[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn binary_covariate_discrepancy_reported() {
        let ds = random_ds(8, 200, true);
        let rows = compare_methods(&ds, &[0.25, 0.5, 0.75], &CovariateSelection::All).unwrap();
        assert_eq!(rows.len(), 9);
        for r in &rows {
            assert!(r.abs_gradient_ip.is_finite() && r.abs_gradient_ip >= 0.0);
            // triangle inequality across the three estimates
            assert!(r.abs_gradient_ip <= r.abs_gradient_nm + r.abs_nm_ip + 1e-12);
        }
        // coefficients may differ on flat optima; the attained objectives may not
        let d = observation_design(&ds, &CovariateSelection::All).unwrap();
        for tau in [0.25, 0.5, 0.75] {
            let ip = fit_design(&d, tau).unwrap();
            let nm = fit_lqm_design(&d, tau, LqmMethod::NelderMead).unwrap();
            assert!((nm.pinball_sum - ip.objective).abs() < 1e-6 * ip.objective);
        }
    }

    #[test]
    fn identical_fits_zero_table() {
        let names = vec!["a".to_string(), "b".to_string()];
        let rows = discrepancy_rows(0.5, &names, &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]);
        for r in rows {
            assert_eq!(
                (r.abs_nm_ip, r.abs_gradient_ip, r.abs_gradient_nm, r.rel_nm_ip, r.rel_gradient_ip),
                (0.0, 0.0, 0.0, 0.0, 0.0)
            );
        }
    }
}
