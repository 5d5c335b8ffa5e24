//! Derivative-free simplex and generalized-gradient minimizers.
//!
//! Both minimizers are deterministic and minimize; likelihood callers pass
//! the negated log-likelihood.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-8;

/// Default iteration cap for a problem of dimension `d`.
pub fn default_max_iter(d: usize) -> usize {
    5000 * d.max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Tolerance,
    MaxIter,
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimResult {
    pub argmin: Vec<f64>,
    /// `f(argmin)`, re-evaluated after the last iteration.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    /// Best objective after every iteration.
    #[serde(skip)]
    pub history: Vec<f64>,
}

fn finite_or_inf(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Initial simplex offsets: `max(0.05 |x_k|, 0.1)` per coordinate.
pub fn default_steps(x0: &[f64]) -> Vec<f64> {
    x0.iter().map(|x| (0.05 * x.abs()).max(0.1)).collect()
}

/// Nelder–Mead with the default initial simplex.
pub fn nelder_mead<F>(f: F, x0: &[f64], tol: f64, max_iter: usize) -> Result<OptimResult>
where
    F: Fn(&[f64]) -> f64,
{
    nelder_mead_with_steps(f, x0, &default_steps(x0), tol, max_iter)
}

/// Nelder–Mead (reflection 1, expansion 2, contraction 1/2, shrink 1/2).
///
/// Stops when the objective spread across the simplex drops below `tol`,
/// or after `max_iter` iterations. Non-finite values away from `x0` are
/// treated as `+inf`.
pub fn nelder_mead_with_steps<F>(
    f: F,
    x0: &[f64],
    steps: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<OptimResult>
where
    F: Fn(&[f64]) -> f64,
{
    let f0 = f(x0);
    if !f0.is_finite() {
        return Err(Error::NonFinite(format!("objective is {f0} at the starting point")));
    }
    let d = x0.len();
    if max_iter == 0 || d == 0 {
        return Ok(OptimResult {
            argmin: x0.to_vec(),
            objective: f0,
            iterations: 0,
            converged: d == 0,
            termination: if d == 0 { Termination::Tolerance } else { Termination::MaxIter },
            history: Vec::new(),
        });
    }

    let mut verts: Vec<Vec<f64>> = Vec::with_capacity(d + 1);
    let mut vals: Vec<f64> = Vec::with_capacity(d + 1);
    verts.push(x0.to_vec());
    vals.push(f0);
    for k in 0..d {
        let mut v = x0.to_vec();
        v[k] += steps[k];
        vals.push(finite_or_inf(f(&v)));
        verts.push(v);
    }

    let mut history = Vec::new();
    let mut termination = Termination::MaxIter;
    let mut iterations = 0;
    let mut centroid = vec![0.0; d];
    let mut order: Vec<usize> = (0..=d).collect();

    while iterations < max_iter {
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        let (best, worst, second) = (order[0], order[d], order[d - 1]);
        if vals[worst] - vals[best] < tol {
            termination = Termination::Tolerance;
            break;
        }
        if simplex_collapsed(&verts, best) {
            termination = Termination::Stalled;
            break;
        }
        iterations += 1;

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for &i in &order[..d] {
            for (c, x) in centroid.iter_mut().zip(&verts[i]) {
                *c += x;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= d as f64);

        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&verts[worst])
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let xr = along(1.0);
        let fr = finite_or_inf(f(&xr));
        if fr < vals[best] {
            let xe = along(2.0);
            let fe = finite_or_inf(f(&xe));
            if fe < fr {
                verts[worst] = xe;
                vals[worst] = fe;
            } else {
                verts[worst] = xr;
                vals[worst] = fr;
            }
        } else if fr < vals[second] {
            verts[worst] = xr;
            vals[worst] = fr;
        } else {
            let (xc, fc) = if fr < vals[worst] {
                let xc = along(0.5);
                let fc = finite_or_inf(f(&xc));
                (xc, fc)
            } else {
                let xc = along(-0.5);
                let fc = finite_or_inf(f(&xc));
                (xc, fc)
            };
            if fc < vals[worst].min(fr) {
                verts[worst] = xc;
                vals[worst] = fc;
            } else {
                let anchor = verts[best].clone();
                for i in 0..=d {
                    if i == best {
                        continue;
                    }
                    for (x, a) in verts[i].iter_mut().zip(&anchor) {
                        *x = a + 0.5 * (*x - a);
                    }
                    vals[i] = finite_or_inf(f(&verts[i]));
                }
            }
        }
        history.push(vals.iter().copied().fold(f64::INFINITY, f64::min));
    }

    let best = (0..=d).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    let argmin = verts[best].clone();
    let objective = f(&argmin);
    Ok(OptimResult {
        argmin,
        objective,
        iterations,
        converged: termination == Termination::Tolerance,
        termination,
        history,
    })
}

fn simplex_collapsed(verts: &[Vec<f64>], best: usize) -> bool {
    verts.iter().enumerate().all(|(i, v)| {
        i == best
            || v
                .iter()
                .zip(&verts[best])
                .all(|(a, b)| (a - b).abs() <= 1e-15 * (1.0 + b.abs()))
    })
}

/// Repeats Nelder–Mead from the incumbent with a fresh simplex until a
/// restart improves the objective by less than `tol * (1 + |f|)`.
///
/// A single simplex run can collapse onto a non-stationary point of a
/// piecewise-linear objective; restarting resolves that.
pub fn nelder_mead_restarts<F>(
    f: F,
    x0: &[f64],
    tol: f64,
    max_iter: usize,
    max_restarts: usize,
) -> Result<OptimResult>
where
    F: Fn(&[f64]) -> f64,
{
    let mut best = nelder_mead(&f, x0, tol, max_iter)?;
    for _ in 0..max_restarts {
        let next = nelder_mead(&f, &best.argmin, tol, max_iter)?;
        let gain = best.objective - next.objective;
        let iterations = best.iterations + next.iterations;
        let mut history = std::mem::take(&mut best.history);
        history.extend(next.history.iter().map(|v| v.min(best.objective)));
        if next.objective < best.objective {
            best = next;
        }
        best.iterations = iterations;
        best.history = history;
        if gain <= tol * (1.0 + best.objective.abs()) {
            break;
        }
    }
    Ok(best)
}

/// Descent along the negative generalized gradient with step halving.
///
/// The step starts at 1 and is halved until the objective strictly
/// decreases; the accepted step length carries over to the next iteration.
/// Terminates when an accepted decrease or the step length `step * |g|`
/// falls below `tol`.
pub fn gradient_search<F, G>(f: F, g: G, x0: &[f64], tol: f64, max_iter: usize) -> Result<OptimResult>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    const HALVING: f64 = 0.5;
    const MAX_HALVINGS: usize = 2000;

    let mut x = x0.to_vec();
    let mut fx = f(&x);
    if !fx.is_finite() {
        return Err(Error::NonFinite(format!("objective is {fx} at the starting point")));
    }
    let mut step = 1.0;
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut termination = Termination::MaxIter;

    'outer: while iterations < max_iter {
        let grad = g(&x);
        if grad.len() != x.len() {
            return Err(Error::Precondition(format!(
                "gradient has length {}, expected {}",
                grad.len(),
                x.len()
            )));
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient is not finite".into()));
        }
        let gnorm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm == 0.0 {
            termination = Termination::Tolerance;
            break;
        }
        let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut halvings = 0;
        let (cand, fc) = loop {
            let cand: Vec<f64> = x.iter().zip(&grad).map(|(xi, gi)| xi - step * gi).collect();
            let fc = f(&cand);
            if fc.is_finite() && fc < fx {
                break (cand, fc);
            }
            step *= HALVING;
            halvings += 1;
            // before the first accepted step only a vanishing step counts as converged
            let floor = if iterations > 0 { tol } else { f64::EPSILON * (1.0 + xnorm) };
            if step * gnorm < floor {
                termination = Termination::Tolerance;
                break 'outer;
            }
            if halvings > MAX_HALVINGS {
                termination = Termination::Stalled;
                break 'outer;
            }
        };
        iterations += 1;
        let decrease = fx - fc;
        x = cand;
        fx = fc;
        history.push(fx);
        if decrease < tol || step * gnorm < tol {
            termination = Termination::Tolerance;
            break;
        }
    }

    let objective = f(&x);
    Ok(OptimResult {
        argmin: x,
        objective,
        iterations,
        converged: termination == Termination::Tolerance,
        termination,
        history,
    })
}
