//! Linear quantile mixed model: asymmetric Laplace observations given
//! Gaussian group effects on intercept and year slope.
//!
//! The marginal likelihood integrates each group's random effect against
//! `N(0, Psi)` with a product Gauss–Hermite rule applied to `u = L xi`,
//! `Psi = L L'`, and is maximized jointly over `(beta, log sigma_eps,
//! log-Cholesky(Psi))` by Nelder–Mead.

use nalgebra::{DMatrix, Matrix2, SymmetricEigen, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::distributions::pinball;
use crate::linalg::{floor_eigen2, log_cholesky_from_psi, psd_cholesky2, psi_from_log_cholesky};
use crate::meq::{MixedParams, PsiMode, RanefMatrix};
use crate::optim::{default_max_iter, nelder_mead_restarts};
use crate::qr::{check_tau, fit_design, observation_design, CovariateSelection, Design};
use crate::{Error, Result};

pub const DEFAULT_KNOTS: usize = 13;
pub const MULTI_START_COUNT: usize = 5;

/// Product Gauss–Hermite rule for a standard bivariate normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub knots: usize,
    /// One-dimensional nodes, increasing and symmetric about 0.
    pub nodes: Vec<f64>,
    /// One-dimensional probability weights, summing to 1.
    pub weights: Vec<f64>,
    pub nodes_2d: Vec<[f64; 2]>,
    pub log_weights_2d: Vec<f64>,
}

impl QuadratureRule {
    /// `K`-point rule exact for polynomials of degree `<= 2K - 1` against
    /// the standard normal density.
    pub fn gauss_hermite(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Precondition("quadrature needs at least one knot".into()));
        }
        let jacobi = DMatrix::from_fn(k, k, |i, j| if i.abs_diff(j) == 1 { (i.max(j) as f64).sqrt() } else { 0.0 });
        let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
        nodes.sort_by(f64::total_cmp);
        let mut weights = Vec::with_capacity(k);
        for x in nodes.iter_mut() {
            for _ in 0..3 {
                let (pk, pk1) = orthonormal_hermite(k, *x);
                let step = pk[k] / ((k as f64).sqrt() * pk1);
                if !step.is_finite() {
                    break;
                }
                *x -= step;
            }
        }
        for i in 0..k / 2 {
            let m = 0.5 * (nodes[k - 1 - i] - nodes[i]);
            nodes[i] = -m;
            nodes[k - 1 - i] = m;
        }
        if k % 2 == 1 {
            nodes[k / 2] = 0.0;
        }
        for &x in &nodes {
            let (p, _) = orthonormal_hermite(k, x);
            weights.push(1.0 / p[..k].iter().map(|v| v * v).sum::<f64>());
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        let mut nodes_2d = Vec::with_capacity(k * k);
        let mut log_weights_2d = Vec::with_capacity(k * k);
        for a in 0..k {
            for b in 0..k {
                nodes_2d.push([nodes[a], nodes[b]]);
                log_weights_2d.push(weights[a].ln() + weights[b].ln());
            }
        }
        Ok(Self { knots: k, nodes, weights, nodes_2d, log_weights_2d })
    }
}

/// Orthonormal probabilists' Hermite values `p_0..p_k` at `x`, and `p_{k-1}`.
fn orthonormal_hermite(k: usize, x: f64) -> (Vec<f64>, f64) {
    let mut p = vec![0.0; k + 1];
    p[0] = 1.0;
    if k >= 1 {
        p[1] = x;
    }
    for j in 1..k {
        p[j + 1] = (x * p[j] - (j as f64).sqrt() * p[j - 1]) / ((j + 1) as f64).sqrt();
    }
    let prev = p[k - 1];
    (p, prev)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Observation design split into contiguous groups.
#[derive(Debug, Clone)]
pub struct LqmmData {
    pub design: Design,
    pub groups: Vec<(String, std::ops::Range<usize>)>,
}

impl LqmmData {
    pub fn new(ds: &Dataset, sel: &CovariateSelection) -> Result<Self> {
        ds.check_ordering()?;
        Ok(Self { design: observation_design(ds, sel)?, groups: ds.groups() })
    }

    /// Quadrature approximation of the marginal log-likelihood.
    pub fn loglik(&self, params: &MixedParams, rule: &QuadratureRule) -> f64 {
        let l = psd_cholesky2(&params.psi_matrix());
        self.loglik_l(&params.beta, &l, params.sigma, params.tau, rule)
    }

    fn loglik_l(&self, beta: &[f64], l: &Matrix2<f64>, sigma: f64, tau: f64, rule: &QuadratureRule) -> f64 {
        let d = &self.design;
        let fixed: Vec<f64> = (0..d.nobs())
            .map(|i| d.x.row(i).iter().zip(beta).map(|(a, b)| a * b).sum())
            .collect();
        let log_norm = (tau * (1.0 - tau) / sigma).ln();
        let mut terms = vec![0.0; rule.nodes_2d.len()];
        let mut total = 0.0;
        for (_, range) in &self.groups {
            let n = range.len() as f64;
            for (k, xi) in rule.nodes_2d.iter().enumerate() {
                let u = l * Vector2::new(xi[0], xi[1]);
                let mut loss = 0.0;
                for i in range.clone() {
                    let mu = fixed[i] + u[0] + u[1] * d.x[(i, 1)];
                    loss += pinball(d.y[i] - mu, tau);
                }
                terms[k] = rule.log_weights_2d[k] + n * log_norm - loss / sigma;
            }
            total += log_sum_exp(&terms);
        }
        total
    }
}

/// Convenience wrapper using every covariate of `ds`.
pub fn loglik_lqmm(params: &MixedParams, ds: &Dataset, rule: &QuadratureRule) -> Result<f64> {
    params.validate()?;
    let data = LqmmData::new(ds, &CovariateSelection::All)?;
    if params.beta.len() != data.design.ncols() {
        return Err(Error::Precondition(format!(
            "beta has {} entries, design has {} columns",
            params.beta.len(),
            data.design.ncols()
        )));
    }
    Ok(data.loglik(params, rule))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqmmOptions {
    pub knots: usize,
    pub multi_start: bool,
    pub jitter_seed: u64,
    pub psi: PsiMode,
    pub covariates: CovariateSelection,
}

impl Default for LqmmOptions {
    fn default() -> Self {
        Self {
            knots: DEFAULT_KNOTS,
            multi_start: false,
            jitter_seed: 0,
            psi: PsiMode::Estimate,
            covariates: CovariateSelection::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartOutcome {
    pub start: MixedParams,
    pub loglik: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqmmFit {
    pub params: MixedParams,
    pub names: Vec<String>,
    pub groups: Vec<String>,
    pub loglik: f64,
    pub knots: usize,
    pub converged: bool,
    pub iterations: usize,
    /// Every start tried; only one unless multi-start was requested.
    pub starts: Vec<StartOutcome>,
}

/// Pooled qr `beta`, mean-pinball `sigma_eps`, and the covariance of
/// per-group qr (intercept, slope) deviations floored to be positive definite.
pub fn default_start(data: &LqmmData, tau: f64) -> Result<MixedParams> {
    let pooled = fit_design(&data.design, tau)?;
    let n = data.design.nobs() as f64;
    let sigma = (pooled.objective / n).max(1e-8);
    let mut devs = Vec::new();
    for (_, range) in &data.groups {
        let sub = DMatrix::from_fn(range.len(), 2, |i, j| data.design.x[(range.start + i, j)]);
        let offset = data.design.x.rows(range.start, range.len()) * nalgebra::DVector::from_column_slice(&pooled.beta);
        let y = data.design.y.rows(range.start, range.len()) - offset;
        let g = Design { x: sub, y, names: vec!["intercept".into(), "year".into()] };
        if let Ok(f) = fit_design(&g, tau) {
            devs.push(Vector2::new(f.beta[0], f.beta[1]));
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
    let floor = 1e-4 * sigma * sigma;
    let mut p = MixedParams { beta: pooled.beta, psi: [[0.0; 2]; 2], sigma, tau };
    p.set_psi(&floor_eigen2(&cov, floor));
    Ok(p)
}

pub fn fit_lqmm(ds: &Dataset, tau: f64, opts: &LqmmOptions, start: Option<MixedParams>) -> Result<LqmmFit> {
    let data = LqmmData::new(ds, &opts.covariates)?;
    fit_lqmm_data(&data, tau, opts, start)
}

pub fn fit_lqmm_data(data: &LqmmData, tau: f64, opts: &LqmmOptions, start: Option<MixedParams>) -> Result<LqmmFit> {
    check_tau(tau)?;
    if opts.knots < 3 || opts.knots.is_multiple_of(2) {
        return Err(Error::Precondition(format!("knots must be odd and at least 3, got {}", opts.knots)));
    }
    let min_groups = if matches!(opts.psi, PsiMode::Estimate) { 2 } else { 1 };
    if data.groups.len() < min_groups {
        return Err(Error::Precondition(format!("needs at least {min_groups} groups, got {}", data.groups.len())));
    }
    let rule = QuadratureRule::gauss_hermite(opts.knots)?;
    let p = data.design.ncols();
    let mut start = match start {
        Some(s) => s,
        None => default_start(data, tau)?,
    };
    start.tau = tau;
    if let PsiMode::Fixed(psi) = opts.psi {
        start.psi = psi;
    }
    start.validate()?;
    if start.beta.len() != p {
        return Err(Error::Precondition(format!("start has {} coefficients, design has {p}", start.beta.len())));
    }
    let fixed_l = match opts.psi {
        PsiMode::Fixed(psi) => Some(psd_cholesky2(&Matrix2::new(psi[0][0], psi[0][1], psi[1][0], psi[1][1]))),
        PsiMode::Estimate => None,
    };
    let unpack = |theta: &[f64]| -> (Matrix2<f64>, f64) {
        let sigma = theta[p].exp();
        let l = match fixed_l {
            Some(l) => l,
            None => psi_from_log_cholesky(&theta[p + 1..p + 4]).1,
        };
        (l, sigma)
    };
    let objective = |theta: &[f64]| -> f64 {
        let (l, sigma) = unpack(theta);
        let v = data.loglik_l(&theta[..p], &l, sigma, tau, &rule);
        if v.is_finite() {
            -v
        } else {
            f64::INFINITY
        }
    };
    let pack = |m: &MixedParams| -> Vec<f64> {
        let mut th = m.beta.clone();
        th.push(m.sigma.ln());
        if fixed_l.is_none() {
            th.extend(log_cholesky_from_psi(&m.psi_matrix(), 1e-12 * m.sigma * m.sigma));
        }
        th
    };
    let theta0 = pack(&start);
    if !objective(&theta0).is_finite() {
        return Err(Error::NonFinite(
            "lqmm likelihood is not finite at the starting values; try a start built from per-group qr fits".into(),
        ));
    }

    let mut starts = vec![theta0.clone()];
    if opts.multi_start {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.jitter_seed);
        for _ in 1..MULTI_START_COUNT {
            let jittered: Vec<f64> = theta0
                .iter()
                .enumerate()
                .map(|(j, v)| {
                    let scale = if j < p { 0.1 * start.sigma.max(v.abs() * 0.01) } else { 0.5 };
                    v + scale * (2.0 * rng.random::<f64>() - 1.0)
                })
                .collect();
            starts.push(jittered);
        }
    }

    let dim = theta0.len();
    let mut outcomes = Vec::new();
    let mut best: Option<(f64, Vec<f64>, bool, usize)> = None;
    for th in &starts {
        let f0 = objective(th);
        if !f0.is_finite() {
            continue;
        }
        let tol = 1e-10 * (1.0 + f0.abs());
        let res = nelder_mead_restarts(objective, th, tol, default_max_iter(dim), 10)?;
        let (l, sigma) = unpack(th);
        let mut sp = MixedParams { beta: th[..p].to_vec(), psi: [[0.0; 2]; 2], sigma, tau };
        sp.set_psi(&(l * l.transpose()));
        outcomes.push(StartOutcome { start: sp, loglik: -res.objective, converged: res.converged });
        if best.as_ref().is_none_or(|b| res.objective < b.0) {
            best = Some((res.objective, res.argmin, res.converged, res.iterations));
        }
    }
    let (obj, theta, converged, iterations) =
        best.ok_or_else(|| Error::NonFinite("no start produced a finite likelihood".into()))?;
    if !converged {
        return Err(Error::solver("Nelder-Mead did not reach tolerance for the lqmm likelihood", Some(theta)));
    }
    let (l, sigma) = unpack(&theta);
    let mut params = MixedParams { beta: theta[..p].to_vec(), psi: [[0.0; 2]; 2], sigma, tau };
    params.set_psi(&(l * l.transpose()));
    Ok(LqmmFit {
        params,
        names: data.design.names.clone(),
        groups: data.groups.iter().map(|(g, _)| g.clone()).collect(),
        loglik: -obj,
        knots: opts.knots,
        converged,
        iterations,
        starts: outcomes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotSweepRow {
    pub knots: usize,
    pub loglik: f64,
    pub beta: Vec<f64>,
    pub sigma: f64,
}

/// Refits at every knot count, each from the same deterministic start.
pub fn knot_sweep(ds: &Dataset, tau: f64, knots: &[usize], opts: &LqmmOptions) -> Result<Vec<KnotSweepRow>> {
    let data = LqmmData::new(ds, &opts.covariates)?;
    let start = default_start(&data, tau)?;
    knots
        .iter()
        .map(|&k| {
            let o = LqmmOptions { knots: k, ..opts.clone() };
            let fit = fit_lqmm_data(&data, tau, &o, Some(start.clone()))?;
            Ok(KnotSweepRow { knots: k, loglik: fit.loglik, beta: fit.params.beta, sigma: fit.params.sigma })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesLine {
    pub group: String,
    pub intercept: f64,
    pub slope: f64,
}

/// Fixed intercept and slope plus each group's predicted deviation.
pub fn species_coefficients(params: &MixedParams, ranef: &RanefMatrix) -> Vec<SpeciesLine> {
    ranef
        .groups
        .iter()
        .zip(&ranef.rows)
        .map(|(g, u)| SpeciesLine { group: g.clone(), intercept: params.beta[0] + u[0], slope: params.beta[1] + u[1] })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{al_draw, al_logpdf, ALParams};
    use crate::dataset::Observation;
    use crate::meq::RanefMethod;
    use rand_distr::{Distribution, Normal};

    fn params(beta: Vec<f64>, psi: [[f64; 2]; 2], sigma: f64, tau: f64) -> MixedParams {
        MixedParams { beta, psi, sigma, tau }
    }

    /// Draws from the mixed AL model for `m` groups of `n` observations.
    fn simulate(seed: u64, m: usize, n: usize, p: &MixedParams) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = psd_cholesky2(&p.psi_matrix());
        let std = Normal::new(0.0, 1.0).unwrap();
        let mut obs = Vec::new();
        for g in 0..m {
            let u = l * Vector2::new(std.sample(&mut rng), std.sample(&mut rng));
            for j in 0..n {
                let t = (j % 10) as i64 - 5;
                let mu = p.beta[0] + u[0] + (p.beta[1] + u[1]) * t as f64;
                let e = al_draw(&ALParams::new(0.0, p.sigma, p.tau).unwrap(), &mut rng);
                obs.push(Observation::new(format!("g{g}"), t, mu + e));
            }
        }
        Dataset::from_centered(vec![], obs, 0)
    }

    #[test]
    fn weights_and_symmetry() {
        for k in [1, 3, 7, 13, 25, 33] {
            let r = QuadratureRule::gauss_hermite(k).unwrap();
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            for i in 0..k {
                assert_eq!(r.nodes[i], -r.nodes[k - 1 - i]);
                assert!(r.weights[i] > 0.0);
            }
            let s2: f64 = r.log_weights_2d.iter().map(|v| v.exp()).sum();
            assert!((s2 - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn monomials_integrate_exactly() {
        // E[X^(2m)] = (2m-1)!! under the standard normal
        for k in [3, 5, 7, 13, 25] {
            let r = QuadratureRule::gauss_hermite(k).unwrap();
            for deg in 0..2 * k {
                let q: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { (1..deg).step_by(2).map(|v| v as f64).product::<f64>() };
                // odd moments vanish; measure them against the absolute moment
                let scale: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.abs().powi(deg as i32)).sum();
                assert!((q - exact).abs() <= 1e-10 * scale.max(1.0), "k={k} deg={deg}: {q} vs {exact}");
            }
        }
    }

    #[test]
    fn point_mass_single_observation() {
        let ds = Dataset::from_centered(vec![], vec![Observation::new("A", 2, 7.5)], 0);
        let p = params(vec![3.0, 1.0], [[1e-30, 0.0], [0.0, 1e-30]], 2.0, 0.3);
        let rule = QuadratureRule::gauss_hermite(7).unwrap();
        let ll = loglik_lqmm(&p, &ds, &rule).unwrap();
        let direct = al_logpdf(7.5, &ALParams::new(5.0, 2.0, 0.3).unwrap());
        assert!((ll - direct).abs() < 1e-9);
    }

    fn trapezoid_loglik(p: &MixedParams, ds: &Dataset, half_width: f64, m: usize) -> f64 {
        let data = LqmmData::new(ds, &CovariateSelection::All).unwrap();
        let l = psd_cholesky2(&p.psi_matrix());
        let h = 2.0 * half_width / m as f64;
        let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut total = 0.0;
        for (_, range) in &data.groups {
            let mut logs = Vec::with_capacity((m + 1) * (m + 1));
            for a in 0..=m {
                for b in 0..=m {
                    let (x0, x1) = (-half_width + a as f64 * h, -half_width + b as f64 * h);
                    let u = l * Vector2::new(x0, x1);
                    let wa = if a == 0 || a == m { 0.5 } else { 1.0 };
                    let wb = if b == 0 || b == m { 0.5 } else { 1.0 };
                    let mut s = (wa * wb * h * h * phi(x0) * phi(x1)).ln();
                    for i in range.clone() {
                        let t = data.design.x[(i, 1)];
                        let mu = p.beta[0] + p.beta[1] * t + u[0] + u[1] * t;
                        s += al_logpdf(data.design.y[i], &ALParams::new(mu, p.sigma, p.tau).unwrap());
                    }
                    logs.push(s);
                }
            }
            total += log_sum_exp(&logs);
        }
        total
    }

    #[test]
    fn agrees_with_trapezoid_oracle() {
        let truth = params(vec![100.0, 0.5], [[0.04, 0.002], [0.002, 0.001]], 3.0, 0.4);
        let ds = simulate(3, 2, 12, &truth);
        let rule = QuadratureRule::gauss_hermite(25).unwrap();
        let gh = loglik_lqmm(&truth, &ds, &rule).unwrap();
        let tr = trapezoid_loglik(&truth, &ds, 8.0, 400);
        assert!((gh - tr).abs() < 1e-4, "{gh} vs {tr}");
    }

    #[test]
    fn order_invariance() {
        let truth = params(vec![100.0, 0.5], [[1.0, 0.1], [0.1, 0.05]], 3.0, 0.6);
        let ds = simulate(4, 3, 10, &truth);
        let rule = QuadratureRule::gauss_hermite(7).unwrap();
        let a = loglik_lqmm(&truth, &ds, &rule).unwrap();
        // relabel so the groups sort in reverse, and reverse rows within groups
        let mut obs: Vec<Observation> = ds.observations().to_vec();
        obs.reverse();
        for o in &mut obs {
            o.group = format!("z{}", 9 - o.group[1..].parse::<u32>().unwrap());
        }
        let b = loglik_lqmm(&truth, &Dataset::from_centered(vec![], obs, 0), &rule).unwrap();
        assert!((a - b).abs() < 1e-9 * a.abs());
    }

    #[test]
    fn larger_scale_flattens() {
        let truth = params(vec![100.0, 0.5], [[1.0, 0.0], [0.0, 0.05]], 3.0, 0.5);
        let ds = simulate(5, 3, 10, &truth);
        let rule = QuadratureRule::gauss_hermite(5).unwrap();
        let grad_norm = |sigma: f64| {
            let mut g2 = 0.0;
            for k in 0..2 {
                let h = 1e-4;
                let mut a = truth.clone();
                a.sigma = sigma;
                let mut b = a.clone();
                a.beta[k] += h;
                b.beta[k] -= h;
                let d = (loglik_lqmm(&a, &ds, &rule).unwrap() - loglik_lqmm(&b, &ds, &rule).unwrap()) / (2.0 * h);
                g2 += d * d;
            }
            g2.sqrt()
        };
        let gs: Vec<f64> = [3.0, 30.0, 300.0].iter().map(|&s| grad_norm(s)).collect();
        assert!(gs[0] > gs[1] && gs[1] > gs[2], "{gs:?}");
    }

    #[test]
    fn tiny_psi_matches_pooled_lqm() {
        let truth = params(vec![100.0, 0.5], [[0.0, 0.0], [0.0, 0.0]], 3.0, 0.3);
        let ds = simulate(6, 3, 30, &truth);
        let tiny = [[1e-10, 0.0], [0.0, 1e-10]];
        let opts = LqmmOptions { psi: PsiMode::Fixed(tiny), knots: 3, ..Default::default() };
        let fit = fit_lqmm(&ds, 0.3, &opts, None).unwrap();
        let pooled = crate::lqm::fit_lqm(&ds, 0.3, crate::lqm::LqmMethod::NelderMead, &CovariateSelection::All).unwrap();
        for (a, b) in fit.params.beta.iter().zip(&pooled.beta) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_even_knots() {
        let truth = params(vec![100.0, 0.5], [[1.0, 0.0], [0.0, 0.05]], 3.0, 0.5);
        let ds = simulate(7, 3, 10, &truth);
        let opts = LqmmOptions { knots: 4, ..Default::default() };
        assert!(matches!(fit_lqmm(&ds, 0.5, &opts, None), Err(Error::Precondition(_))));
    }

    #[test]
    fn fit_improves_on_start_and_multistart_keeps_best() {
        let truth = params(vec![100.0, 0.5], [[4.0, 0.2], [0.2, 0.1]], 2.0, 0.5);
        let ds = simulate(8, 4, 30, &truth);
        let opts = LqmmOptions { knots: 5, multi_start: true, ..Default::default() };
        let fit = fit_lqmm(&ds, 0.5, &opts, None).unwrap();
        assert_eq!(fit.starts.len(), MULTI_START_COUNT);
        let rule = QuadratureRule::gauss_hermite(5).unwrap();
        let data = LqmmData::new(&ds, &CovariateSelection::All).unwrap();
        let start = default_start(&data, 0.5).unwrap();
        assert!(fit.loglik >= data.loglik(&start, &rule));
        assert!(fit.starts.iter().all(|s| s.loglik <= fit.loglik + 1e-9));
        assert!((data.loglik(&fit.params, &rule) - fit.loglik).abs() < 1e-8 * fit.loglik.abs());
    }

    #[test]
    fn species_lines_add_deviations() {
        let p = params(vec![10.0, -1.0], [[1.0, 0.0], [0.0, 1.0]], 1.0, 0.5);
        let zero = RanefMatrix::zeros(vec!["a".into(), "b".into()], RanefMethod::Blup);
        assert!(species_coefficients(&p, &zero).iter().all(|l| l.intercept == 10.0 && l.slope == -1.0));
        let mut re = zero.clone();
        re.rows = vec![[1.5, 0.25], [-2.0, 0.5]];
        let mut shifted = p.clone();
        shifted.beta[0] += 3.0;
        shifted.beta[1] -= 0.5;
        let mut re2 = re.clone();
        for r in &mut re2.rows {
            r[0] -= 3.0;
            r[1] += 0.5;
        }
        assert_eq!(species_coefficients(&p, &re), species_coefficients(&shifted, &re2));
    }
}
