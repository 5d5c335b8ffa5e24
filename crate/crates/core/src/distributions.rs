//! Pinball loss and the asymmetric Laplace distribution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Check loss `v * (tau - 1{v < 0})`.
#[inline]
pub fn pinball(v: f64, tau: f64) -> f64 {
    if v >= 0.0 {
        v * tau
    } else {
        v * (tau - 1.0)
    }
}

/// Location, scale and asymmetry of an asymmetric Laplace law. The location
/// is exactly the `tau`-quantile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ALParams {
    pub mu: f64,
    pub sigma: f64,
    pub tau: f64,
}

impl ALParams {
    pub fn new(mu: f64, sigma: f64, tau: f64) -> Result<Self> {
        if !mu.is_finite() {
            return Err(Error::Precondition(format!("AL location {mu} is not finite")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Precondition(format!("AL scale {sigma} must be positive")));
        }
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Precondition(format!("AL asymmetry {tau} outside (0, 1)")));
        }
        Ok(Self { mu, sigma, tau })
    }

    /// Mean `mu + sigma (1 - 2 tau) / (tau (1 - tau))`.
    pub fn mean(&self) -> f64 {
        self.mu + al_mean_offset(self.sigma, self.tau)
    }
}

/// Offset of the AL mean from its location.
pub fn al_mean_offset(sigma: f64, tau: f64) -> f64 {
    sigma * (1.0 - 2.0 * tau) / (tau * (1.0 - tau))
}

pub fn al_logpdf(y: f64, p: &ALParams) -> f64 {
    (p.tau * (1.0 - p.tau) / p.sigma).ln() - pinball(y - p.mu, p.tau) / p.sigma
}

pub fn al_pdf(y: f64, p: &ALParams) -> f64 {
    al_logpdf(y, p).exp()
}

pub fn al_cdf(y: f64, p: &ALParams) -> f64 {
    let z = (y - p.mu) / p.sigma;
    if z <= 0.0 {
        p.tau * ((1.0 - p.tau) * z).exp()
    } else {
        1.0 - (1.0 - p.tau) * (-p.tau * z).exp()
    }
}

/// Inverse CDF for `prob` in (0, 1).
pub fn al_quantile(prob: f64, p: &ALParams) -> f64 {
    if prob <= p.tau {
        p.mu + p.sigma / (1.0 - p.tau) * (prob / p.tau).ln()
    } else {
        p.mu - p.sigma / p.tau * ((1.0 - prob) / (1.0 - p.tau)).ln()
    }
}

/// `n` draws by inverse-CDF transform of open-interval uniforms.
pub fn al_sample(p: &ALParams, rng_seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    (0..n).map(|_| al_draw(p, &mut rng)).collect()
}

pub(crate) fn al_draw<R: Rng + ?Sized>(p: &ALParams, rng: &mut R) -> f64 {
    let u: f64 = rng.sample(rand_distr::Open01);
    al_quantile(u, p)
}
