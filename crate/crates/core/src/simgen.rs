//! Synthetic grouped arrival data with known quantile lines.
//!
//! For every group and year a count is drawn from a negative binomial
//! (Gamma–Poisson mixture with mean `count_mean` and dispersion `k`, variance
//! `mean + mean^2 / k`), then that many arrival days are drawn i.i.d. from
//! `a + b * (year - center) + s * E` where `E` follows the chosen family.
//! The law only shifts with the year, so every true quantile line is exactly
//! linear with slope `b`.

use std::path::Path;

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma as GammaDist, Normal as NormalDist};

use crate::dataset::{Dataset, Observation};
use crate::distributions::{al_draw, al_quantile, ALParams};
use crate::linalg::psd_cholesky2;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Normal,
    /// Standard AL law whose `tau0`-quantile is 0.
    AsymmetricLaplace { tau0: f64 },
    /// `Gamma(shape, 1) - shape`, a right-skewed law with mean 0.
    GammaShifted { shape: f64 },
}

impl Family {
    /// Quantile function of the standardized error `E`.
    pub fn quantile(&self, tau: f64) -> Result<f64> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Precondition(format!("quantile level {tau} outside (0, 1)")));
        }
        match *self {
            Family::Normal => Ok(NormalDist::standard().inverse_cdf(tau)),
            Family::AsymmetricLaplace { tau0 } => Ok(al_quantile(tau, &ALParams::new(0.0, 1.0, tau0)?)),
            Family::GammaShifted { shape } => {
                let g = GammaDist::new(shape, 1.0).map_err(|e| Error::Config(e.to_string()))?;
                Ok(g.inverse_cdf(tau) - shape)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Family::Normal => Ok(()),
            Family::AsymmetricLaplace { tau0 } if tau0 > 0.0 && tau0 < 1.0 => Ok(()),
            Family::GammaShifted { shape } if shape > 0.0 && shape.is_finite() => Ok(()),
            other => Err(Error::Config(format!("invalid family parameters {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    pub intercept: f64,
    pub slope: f64,
    pub scale: f64,
    pub count_mean: f64,
    pub dispersion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub groups: Vec<GroupSpec>,
    pub family: Family,
    pub years: usize,
    pub first_year: i64,
    pub center_year: i64,
    pub seed: u64,
    /// Round days to whole julian days.
    pub round_days: bool,
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() || self.years == 0 {
            return Err(Error::Config("need at least one group and one year".into()));
        }
        self.family.validate()?;
        for g in &self.groups {
            if !(g.count_mean > 0.0 && g.dispersion > 0.0 && g.scale > 0.0) {
                return Err(Error::Config(format!("group `{}`: mean, dispersion and scale must be positive", g.name)));
            }
            if !(g.intercept.is_finite() && g.slope.is_finite()) {
                return Err(Error::Config(format!("group `{}`: non-finite line", g.name)));
            }
        }
        let mut names: Vec<&str> = self.groups.iter().map(|g| g.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("group names must be distinct".into()));
        }
        Ok(())
    }

    pub fn group(&self, name: &str) -> Result<&GroupSpec> {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .ok_or_else(|| Error::Mapping(format!("no group `{name}` in the simulation config")))
    }

    /// Parses `key = value` lines; `#` starts a comment. Per-group keys take
    /// either one value per group or a single value for all.
    ///
    /// Keys: `groups`, `intercept`, `slope`, `scale`, `count_mean`,
    /// `dispersion`, `family` (`normal`, `asymmetric_laplace:TAU0`,
    /// `gamma_shifted:SHAPE`), `years`, `first_year`, `center_year`, `seed`,
    /// `round_days`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: Vec<(String, String)> = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", ln + 1)))?;
            let k = k.trim().to_string();
            if kv.iter().any(|(e, _)| *e == k) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", ln + 1)));
            }
            kv.push((k, v.trim().to_string()));
        }
        let get = |k: &str| kv.iter().find(|(e, _)| e == k).map(|(_, v)| v.as_str());
        const KNOWN: [&str; 12] = [
            "groups", "intercept", "slope", "scale", "count_mean", "dispersion", "family", "years", "first_year",
            "center_year", "seed", "round_days",
        ];
        if let Some((k, _)) = kv.iter().find(|(k, _)| !KNOWN.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        let req = |k: &str| get(k).ok_or_else(|| Error::Config(format!("missing key `{k}`")));
        let names: Vec<String> = req("groups")?.split(',').map(|s| s.trim().to_string()).collect();
        if names.iter().any(|n| n.is_empty()) {
            return Err(Error::Config("empty group name".into()));
        }
        let m = names.len();
        let per_group = |k: &str, default: Option<f64>| -> Result<Vec<f64>> {
            let Some(v) = get(k) else {
                return default
                    .map(|d| vec![d; m])
                    .ok_or_else(|| Error::Config(format!("missing key `{k}`")));
            };
            let vals: Vec<f64> = v
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Config(format!("`{k}`: cannot parse `{s}`"))))
                .collect::<Result<_>>()?;
            match vals.len() {
                1 => Ok(vec![vals[0]; m]),
                n if n == m => Ok(vals),
                n => Err(Error::Config(format!("`{k}` has {n} values for {m} groups"))),
            }
        };
        let intercept = per_group("intercept", None)?;
        let slope = per_group("slope", Some(0.0))?;
        let scale = per_group("scale", None)?;
        let count_mean = per_group("count_mean", None)?;
        let dispersion = per_group("dispersion", Some(1e6))?;
        let family = match get("family").unwrap_or("normal") {
            "normal" => Family::Normal,
            f => {
                let (name, arg) = f
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("family `{f}` needs a parameter")))?;
                let arg: f64 = arg.trim().parse().map_err(|_| Error::Config(format!("bad family parameter in `{f}`")))?;
                match name.trim() {
                    "asymmetric_laplace" => Family::AsymmetricLaplace { tau0: arg },
                    "gamma_shifted" => Family::GammaShifted { shape: arg },
                    other => return Err(Error::Config(format!("unknown family `{other}`"))),
                }
            }
        };
        let int = |k: &str| -> Result<Option<i64>> {
            get(k).map(|v| v.parse::<i64>().map_err(|_| Error::Config(format!("`{k}`: cannot parse `{v}`")))).transpose()
        };
        let years = int("years")?.ok_or_else(|| Error::Config("missing key `years`".into()))?;
        if years <= 0 {
            return Err(Error::Config("`years` must be positive".into()));
        }
        let first_year = int("first_year")?.unwrap_or(1);
        let center_year = int("center_year")?.unwrap_or(first_year + (years - 1) / 2);
        let seed = get("seed")
            .map(|v| v.parse::<u64>().map_err(|_| Error::Config(format!("`seed`: cannot parse `{v}`"))))
            .transpose()?
            .unwrap_or(0);
        let round_days = match get("round_days").unwrap_or("false") {
            "true" => true,
            "false" => false,
            v => return Err(Error::Config(format!("`round_days`: expected true or false, got `{v}`"))),
        };
        let groups = (0..m)
            .map(|i| GroupSpec {
                name: names[i].clone(),
                intercept: intercept[i],
                slope: slope[i],
                scale: scale[i],
                count_mean: count_mean[i],
                dispersion: dispersion[i],
            })
            .collect();
        let spec = SimSpec { groups, family, years: years as usize, first_year, center_year, seed, round_days };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Groups whose (intercept, slope) are `beta + u_i` with `u_i ~ N(0, psi)`.
#[allow(clippy::too_many_arguments)]
pub fn random_effect_groups(
    m: usize,
    beta: [f64; 2],
    psi: &Matrix2<f64>,
    scale: f64,
    count_mean: f64,
    dispersion: f64,
    seed: u64,
) -> Vec<GroupSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = psd_cholesky2(psi);
    (0..m)
        .map(|i| {
            let xi = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            let u = l * xi;
            GroupSpec {
                name: format!("g{i:02}"),
                intercept: beta[0] + u[0],
                slope: beta[1] + u[1],
                scale,
                count_mean,
                dispersion,
            }
        })
        .collect()
}

/// Negative binomial draw with the given mean and dispersion.
pub fn negbin_draw<R: Rng + ?Sized>(mean: f64, dispersion: f64, rng: &mut R) -> u64 {
    let lambda = Gamma::new(dispersion, mean / dispersion).expect("validated parameters").sample(rng);
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).map(|p| p.sample(rng) as u64).unwrap_or(0)
}

fn error_draw<R: Rng + ?Sized>(family: &Family, rng: &mut R) -> f64 {
    match *family {
        Family::Normal => Normal::new(0.0, 1.0).expect("unit normal").sample(rng),
        Family::AsymmetricLaplace { tau0 } => al_draw(&ALParams { mu: 0.0, sigma: 1.0, tau: tau0 }, rng),
        Family::GammaShifted { shape } => Gamma::new(shape, 1.0).expect("validated shape").sample(rng) - shape,
    }
}

/// Draws a dataset; each group uses its own stream of the seeded generator.
pub fn simulate(spec: &SimSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut obs = Vec::new();
    for (gi, g) in spec.groups.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(gi as u64);
        for k in 0..spec.years {
            let year = spec.first_year + k as i64;
            let t = (year - spec.center_year) as f64;
            let count = negbin_draw(g.count_mean, g.dispersion, &mut rng);
            for _ in 0..count {
                let mut day = g.intercept + g.slope * t + g.scale * error_draw(&spec.family, &mut rng);
                if spec.round_days {
                    day = day.round();
                }
                obs.push(Observation::new(g.name.clone(), year, day));
            }
        }
    }
    if obs.is_empty() {
        return Err(Error::Config("simulation produced no observations".into()));
    }
    Dataset::from_raw(vec![], obs, Some(spec.center_year))
}

/// True `tau`-quantile line of a group in centered years.
pub fn true_quantile_line(spec: &SimSpec, group: &str, tau: f64) -> Result<(f64, f64)> {
    let g = spec.group(group)?;
    Ok((g.intercept + g.scale * spec.family.quantile(tau)?, g.slope))
}
