//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use phenoquant::bootstrap::{make_plan, run_shared, BootMethod};
use phenoquant::cli::{cmd_fit, Cli, Command, FitReport};
use phenoquant::dataset::{build_cells, Dataset, Observation};
use phenoquant::distributions::{al_cdf, al_pdf, ALParams};
use phenoquant::eq::fit_eq;
use phenoquant::linalg::psd_cholesky2;
use phenoquant::lqm::{fit_lqm, fit_lqm_design, LqmMethod};
use phenoquant::lqmm::{fit_lqmm, loglik_lqmm, LqmmOptions, QuadratureRule};
use phenoquant::meq::{fit_meq, predict_ranef_meq, GroupedCells, MeqOptions, MixedParams, PsiMode};
use phenoquant::qr::{fit_design, oracle_design, residual_sign_counts, residual_zero_tol, CovariateSelection, Design};
use phenoquant::ranef::{group_blup, reduced_inverse, BlupMode, GroupResiduals};
use phenoquant::simgen::{random_effect_groups, simulate, Family, GroupSpec, SimSpec};

struct Tracking;

thread_local! {
    static TRACK: Cell<bool> = const { Cell::new(false) };
}
static LARGEST: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Tracking {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        if TRACK.try_with(Cell::get).unwrap_or(false) {
            LARGEST.fetch_max(layout.size(), Ordering::Relaxed);
        }
        unsafe { System.alloc(layout) }
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) }
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        if TRACK.try_with(Cell::get).unwrap_or(false) {
            LARGEST.fetch_max(new_size, Ordering::Relaxed);
        }
        unsafe { System.realloc(ptr, layout, new_size) }
    }
}

#[global_allocator]
static GLOBAL: Tracking = Tracking;

fn verdict(id: u32, title: &str, pass: bool, elapsed: Duration, limit: Duration, detail: String) {
    let ok = pass && elapsed < limit;
    println!(
        "{} criterion {id:>2} {title}: {detail}; {:.2}s (limit {}s)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    assert!(pass, "criterion {id} failed: {detail}");
    assert!(elapsed < limit, "criterion {id} exceeded {limit:?}");
}

fn random_design(rng: &mut ChaCha8Rng, n: usize, slopes: usize, ties: bool) -> Design {
    let cols = 1 + slopes;
    let x = DMatrix::from_fn(n, cols, |_, j| if j == 0 { 1.0 } else { rng.random_range(-10i64..=10) as f64 });
    let y = DVector::from_fn(n, |i, _| {
        let noise: f64 = rng.sample(StandardNormal);
        let v = 50.0 + (1..cols).map(|j| 0.3 * x[(i, j)]).sum::<f64>() + 4.0 * noise * noise.abs().sqrt();
        if ties { v.round() } else { v }
    });
    let mut names = vec!["intercept".to_string()];
    names.extend((1..cols).map(|j| format!("x{j}")));
    Design { x, y, names }
}

const TAUS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];

#[test]
fn criterion_01_qr_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for i in 0..200 {
        let slopes = 1 + i % 2;
        let n = rng.random_range(slopes + 3..=12);
        let d = random_design(&mut rng, n, slopes, false);
        let tau = TAUS[i % TAUS.len()];
        let ip = fit_design(&d, tau).expect("ip fit");
        let oracle = oracle_design(&d, tau).expect("oracle fit");
        let rel = (ip.objective - oracle.objective).abs() / oracle.objective.abs().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        if rel > 1e-8 {
            failures += 1;
        }
    }
    verdict(
        1,
        "qr oracle equivalence",
        failures == 0,
        start.elapsed(),
        Duration::from_secs(30),
        format!("200 instances, {failures} above 1e-8, max rel gap {worst:.2e}"),
    );
}

#[test]
fn criterion_02_qr_optimality_counts() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut bad = Vec::new();
    for i in 0..100 {
        let n = rng.random_range(10..=500);
        let d = random_design(&mut rng, n, 1 + i % 2, i % 2 == 0);
        let tau = rng.random_range(0.02..0.98);
        let fit = fit_design(&d, tau).expect("fit");
        let (neg, nonpos) = residual_sign_counts(&d.residuals(&fit.beta), residual_zero_tol(&d));
        let nt = n as f64 * tau;
        if !(neg as f64 <= nt && nt <= nonpos as f64) {
            bad.push((i, neg, nt, nonpos));
        }
    }
    verdict(
        2,
        "qr optimality counts",
        bad.is_empty(),
        start.elapsed(),
        Duration::from_secs(30),
        format!("100 instances, violations {bad:?}"),
    );
}

#[test]
fn criterion_03_lqm_qr_identity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let n = rng.random_range(30..=300);
        let d = random_design(&mut rng, n, 1, false);
        let tau = TAUS[i % TAUS.len()];
        let ip = fit_design(&d, tau).expect("ip fit");
        let nm = fit_lqm_design(&d, tau, LqmMethod::NelderMead).expect("nm fit");
        worst = worst.max((nm.pinball_sum - ip.objective).abs() / ip.objective);
    }
    verdict(
        3,
        "lqm/qr identity",
        worst <= 1e-6,
        start.elapsed(),
        Duration::from_secs(120),
        format!("50 instances, max rel objective gap {worst:.2e}"),
    );
}

/// Composite Simpson over [0, len] with `m` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, len: f64, m: usize) -> f64 {
    let h = len / m as f64;
    let mut s = f(0.0) + f(len);
    for k in 1..m {
        s += f(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn criterion_04_al_identities() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut cdf_misses = 0;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let mu = rng.random_range(-200.0..200.0);
        let sigma = 10f64.powf(rng.random_range(-2.0..2.0));
        let tau = rng.random_range(0.005..0.995);
        let p = ALParams::new(mu, sigma, tau).expect("valid");
        if al_cdf(mu, &p) != tau {
            cdf_misses += 1;
        }
        // each side decays at rate min(tau, 1 - tau) / sigma or faster
        let len = 45.0 * sigma / tau.min(1.0 - tau);
        let right = simpson(|v| al_pdf(mu + v, &p), len, 40_000);
        let left = simpson(|v| al_pdf(mu - v, &p), len, 40_000);
        worst = worst.max((left + right - 1.0).abs());
    }
    verdict(
        4,
        "al identities",
        cdf_misses == 0 && worst <= 1e-6,
        start.elapsed(),
        Duration::from_secs(10),
        format!("1000 triples, cdf(mu) != tau in {cdf_misses}, max |integral - 1| {worst:.2e}"),
    );
}

fn random_psi(rng: &mut ChaCha8Rng) -> Matrix2<f64> {
    let l = Matrix2::new(rng.random_range(0.0..3.0), 0.0, rng.random_range(-1.0..1.0), rng.random_range(0.0..0.5));
    let mut psi = l * l.transpose();
    psi[(0, 1)] = psi[(1, 0)];
    psi
}

#[test]
fn criterion_05_block_inversion() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst_inv = 0.0f64;
    let mut worst_blup = 0.0f64;
    for _ in 0..100 {
        let psi = random_psi(&mut rng);
        let sigma_eps = rng.random_range(0.2..5.0);
        let t = rng.random_range(1..=6);
        let mut years: Vec<f64> = (0..t).map(|_| rng.random_range(-12.0..12.0)).collect();
        years.sort_by(f64::total_cmp);
        let counts: Vec<usize> = (0..t).map(|_| rng.random_range(1..=10)).collect();
        let bc = reduced_inverse(&psi, sigma_eps, &counts, &years).expect("reduced inverse");
        let n = bc.nobs();
        let prod = bc.dense_sigma(&psi) * bc.dense_inverse() - DMatrix::identity(n, n);
        let inf_norm = (0..n).map(|i| prod.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
        worst_inv = worst_inv.max(inf_norm);

        let mut g = GroupResiduals { years: vec![], residuals: vec![] };
        for (s, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                g.years.push(years[s]);
                g.residuals.push(3.0 * rng.sample::<f64, _>(StandardNormal));
            }
        }
        let dense = group_blup(&psi, sigma_eps, &g, BlupMode::Dense).expect("dense");
        let block = group_blup(&psi, sigma_eps, &g, BlupMode::Block).expect("block");
        let seq = group_blup(&psi, sigma_eps, &g, BlupMode::Sequential).expect("sequential");
        let scale = 1.0 + dense.amax();
        worst_blup = worst_blup.max((block - dense).amax() / scale).max((seq - dense).amax() / scale);
    }
    verdict(
        5,
        "block inversion",
        worst_inv < 1e-10 && worst_blup <= 1e-9,
        start.elapsed(),
        Duration::from_secs(60),
        format!("max inf-norm residual {worst_inv:.2e}, max blup disagreement {worst_blup:.2e}"),
    );
}

#[test]
fn criterion_06_memory_contract() {
    let n_years = 40usize;
    let n = 40_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut g = GroupResiduals { years: Vec::with_capacity(n), residuals: Vec::with_capacity(n) };
    for i in 0..n {
        g.years.push((i * n_years / n) as f64 - 19.5);
        g.residuals.push(rng.sample(StandardNormal));
    }
    let psi = Matrix2::new(4.0, 0.1, 0.1, 0.04);
    let start = Instant::now();
    TRACK.with(|t| t.set(true));
    let block = group_blup(&psi, 2.0, &g, BlupMode::Block);
    let seq = group_blup(&psi, 2.0, &g, BlupMode::Sequential);
    TRACK.with(|t| t.set(false));
    let elapsed = start.elapsed();
    let largest = LARGEST.load(Ordering::Relaxed);
    let (block, seq) = (block.expect("block"), seq.expect("sequential"));
    let agree = (block - seq).amax() <= 1e-9 * (1.0 + block.amax());
    // an n x n array of f64 would be n * n * 8 bytes; allow only O(n)
    let bound = 64 * n * 8;
    verdict(
        6,
        "memory contract",
        largest < bound && agree,
        elapsed,
        Duration::from_secs(30),
        format!("n = {n}, T = {n_years}, largest allocation {largest} bytes (bound {bound}, n x n would be {})", n * n * 8),
    );
}

#[test]
fn criterion_07_eq_closed_form() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let years = rng.random_range(4..=15);
        let mut obs = Vec::new();
        for y in 0..years {
            for _ in 0..rng.random_range(1..=12) {
                obs.push(Observation::new("A", 1990 + y, 100.0 + 0.5 * y as f64 + rng.random_range(-8.0..8.0)));
            }
        }
        let ds = Dataset::from_raw(vec![], obs, None).expect("dataset");
        let tau = TAUS[i % TAUS.len()];
        let fit = fit_eq(&build_cells(&ds).expect("cells"), tau, true).expect("eq fit");

        // independent cell quantiles and weighted normal equations
        let mut xtwx = Matrix2::zeros();
        let mut xtwy = Vector2::zeros();
        for y in 0..years {
            let t = (1990 + y - ds.center_year()) as f64;
            let mut days: Vec<f64> =
                ds.observations().iter().filter(|o| o.year as f64 == t).map(|o| o.day).collect();
            days.sort_by(f64::total_cmp);
            let k = (tau * days.len() as f64 - 1e-12).ceil().max(1.0) as usize;
            let q = days[k - 1];
            let w = days.len() as f64;
            let x = Vector2::new(1.0, t);
            xtwx += x * x.transpose() * w;
            xtwy += x * (w * q);
        }
        let beta = xtwx.lu().solve(&xtwy).expect("normal equations");
        for j in 0..2 {
            worst = worst.max((fit.beta[j] - beta[j]).abs() / (1.0 + beta[j].abs()));
        }
    }
    verdict(
        7,
        "eq closed form",
        worst <= 1e-10,
        start.elapsed(),
        Duration::from_secs(10),
        format!("100 cell tables, max rel coefficient gap {worst:.2e}"),
    );
}

fn single_group_spec(seed: u64, years: usize, count_mean: f64, dispersion: f64) -> SimSpec {
    SimSpec {
        groups: vec![GroupSpec {
            name: "A".into(),
            intercept: 120.0,
            slope: -0.15,
            scale: 6.0,
            count_mean,
            dispersion,
        }],
        family: Family::Normal,
        years,
        first_year: 1971,
        center_year: 1990,
        seed,
        round_days: false,
    }
}

#[test]
fn criterion_08_single_species_recovery() {
    let start = Instant::now();
    let taus = [0.25, 0.5, 0.75];
    let mut covered = [0usize; 3];
    let mut sizes = Vec::new();
    for rep in 0..20u64 {
        let ds = simulate(&single_group_spec(8000 + rep, 40, 50.0, 10.0)).expect("simulate");
        sizes.push(ds.len());
        let plan = make_plan(ds.len(), 200, 9000 + rep).expect("plan");
        let boot = run_shared(&ds, &[BootMethod::Qr], &taus, &plan).expect("bootstrap");
        let rows = boot.intervals(0.025, 0.975).expect("intervals");
        for (k, &tau) in taus.iter().enumerate() {
            let row = rows.iter().find(|r| r.tau == tau && r.coefficient == "year").expect("slope row");
            if row.interval.covers(-0.15) {
                covered[k] += 1;
            }
        }
    }
    let mean_n = sizes.iter().sum::<usize>() as f64 / sizes.len() as f64;
    verdict(
        8,
        "single-species recovery",
        covered.iter().all(|&c| c >= 18),
        start.elapsed(),
        Duration::from_secs(600),
        format!("mean N {mean_n:.0}, slope covered at tau 0.25/0.5/0.75 in {covered:?} of 20"),
    );
}

/// Maximizes the Gaussian conditional log density of one group's random
/// effect on a two-level grid over `v`, with `u = L v`.
fn grid_mode(x: &[(f64, f64, f64)], l: &Matrix2<f64>, sigma2: f64) -> (Vector2<f64>, f64) {
    let logp = |v: Vector2<f64>| {
        let u = l * v;
        let ss: f64 = x.iter().map(|&(t, r, w)| w * (r - u[0] - u[1] * t).powi(2)).sum();
        -0.5 * ss / sigma2 - 0.5 * v.norm_squared()
    };
    let search = |center: Vector2<f64>, half: f64, step: f64| {
        let m = (half / step).round() as i64;
        let mut best = (center, f64::NEG_INFINITY);
        for i in -m..=m {
            for j in -m..=m {
                let v = center + Vector2::new(i as f64 * step, j as f64 * step);
                let lp = logp(v);
                if lp > best.1 {
                    best = (v, lp);
                }
            }
        }
        best.0
    };
    let coarse = search(Vector2::zeros(), 8.0, 0.05);
    let fine_step = 1e-3;
    (l * search(coarse, 0.1, fine_step), fine_step)
}

#[test]
fn criterion_09_multi_species_recovery() {
    let start = Instant::now();
    let psi = Matrix2::new(16.0, 0.05, 0.05, 0.01);
    let mut slopes = Vec::new();
    let mut mode_misses = 0;
    let mut checked = 0;
    for rep in 0..30u64 {
        let groups = random_effect_groups(6, [120.0, -0.15], &psi, 5.0, 40.0, 1e6, 1000 + rep);
        let spec = SimSpec {
            groups,
            family: Family::Normal,
            years: 30,
            first_year: 1981,
            center_year: 1995,
            seed: 2000 + rep,
            round_days: false,
        };
        let ds = simulate(&spec).expect("simulate");
        let cells = build_cells(&ds).expect("cells");
        let fit = fit_meq(&cells, 0.5, &MeqOptions::default()).expect("meq fit");
        slopes.push(fit.params.beta[1]);

        let grouped = GroupedCells::new(&cells, 0.5, true).expect("grouped cells");
        let re = predict_ranef_meq(&fit, &grouped).expect("ranef");
        let l = psd_cholesky2(&fit.params.psi_matrix());
        let sigma2 = fit.params.sigma.powi(2);
        let d = &grouped.design;
        let beta = DVector::from_column_slice(&fit.params.beta);
        let resid = &d.y - &d.x * beta;
        for (gi, (_, range)) in grouped.groups.iter().enumerate() {
            let x: Vec<(f64, f64, f64)> = range.clone().map(|i| (d.x[(i, 1)], resid[i], d.w[i])).collect();
            let (u_grid, h) = grid_mode(&x, &l, sigma2);
            let tol = [h * (l[(0, 0)].abs() + l[(0, 1)].abs()), h * (l[(1, 0)].abs() + l[(1, 1)].abs())];
            let u = re.rows[gi];
            checked += 1;
            if (u[0] - u_grid[0]).abs() > tol[0] + 1e-12 || (u[1] - u_grid[1]).abs() > tol[1] + 1e-12 {
                mode_misses += 1;
            }
        }
    }
    let m = slopes.len() as f64;
    let mean = slopes.iter().sum::<f64>() / m;
    let sd = (slopes.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
    let se = sd / m.sqrt();
    let z = (mean + 0.15).abs() / se;
    verdict(
        9,
        "multi-species recovery",
        z <= 3.0 && mode_misses == 0,
        start.elapsed(),
        Duration::from_secs(600),
        format!(
            "mean fixed slope {mean:.5} (true -0.15, {z:.2} MC SEs), grid-mode mismatches {mode_misses} of {checked}"
        ),
    );
}

fn lqmm_data(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let al = ALParams::new(0.0, 1.0, 0.5).expect("al");
    let mut obs = Vec::new();
    for g in ["a", "b", "c"] {
        let u0: f64 = 0.2 * rng.sample::<f64, _>(StandardNormal);
        let u1: f64 = 0.1 * rng.sample::<f64, _>(StandardNormal);
        for t in -7i64..=7 {
            for _ in 0..2 {
                let e = phenoquant::distributions::al_quantile(rng.random_range(1e-9..1.0), &al);
                obs.push(Observation::new(g, t, 10.0 + 0.5 * t as f64 + u0 + u1 * t as f64 + e));
            }
        }
    }
    Dataset::from_raw(vec![], obs, Some(0)).expect("dataset")
}

/// Marginal log-likelihood by a dense trapezoid rule over `xi`, `u = L xi`.
fn trapezoid_loglik(ds: &Dataset, p: &MixedParams, half: f64, m: usize) -> f64 {
    let l = psd_cholesky2(&p.psi_matrix());
    let al = ALParams::new(0.0, p.sigma, p.tau).expect("al");
    let h = 2.0 * half / (m - 1) as f64;
    let mut total = 0.0;
    for (_, range) in ds.groups() {
        let obs = &ds.observations()[range];
        let mut logs = Vec::with_capacity(m * m);
        for i in 0..m {
            for j in 0..m {
                let xi = Vector2::new(-half + i as f64 * h, -half + j as f64 * h);
                let u = l * xi;
                let mut lp = -0.5 * xi.norm_squared() - (2.0 * std::f64::consts::PI).ln();
                for o in obs {
                    let t = o.year as f64;
                    let mu = p.beta[0] + p.beta[1] * t + u[0] + u[1] * t;
                    lp += al_pdf(o.day - mu, &al).ln();
                }
                let wi = if i == 0 || i == m - 1 { 0.5 } else { 1.0 };
                let wj = if j == 0 || j == m - 1 { 0.5 } else { 1.0 };
                logs.push(lp + (wi * wj * h * h).ln());
            }
        }
        let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        total += mx + logs.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    }
    total
}

#[test]
fn criterion_10_lqmm_sanity() {
    let start = Instant::now();
    let ds = lqmm_data(1010);
    let p = MixedParams { beta: vec![10.0, 0.5], psi: [[0.04, 0.005], [0.005, 0.01]], sigma: 1.0, tau: 0.5 };
    let oracle = trapezoid_loglik(&ds, &p, 8.0, 801);
    let ks = [3usize, 5, 9, 17, 33];
    let lls: Vec<f64> = ks
        .iter()
        .map(|&k| loglik_lqmm(&p, &ds, &QuadratureRule::gauss_hermite(k).expect("rule")).expect("loglik"))
        .collect();
    let gap = (lls[ks.len() - 1] - oracle).abs();
    let gap13 = (loglik_lqmm(&p, &ds, &QuadratureRule::gauss_hermite(13).expect("rule")).expect("loglik") - oracle).abs();
    let diffs: Vec<f64> = lls.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let diffs_txt: Vec<String> = diffs.iter().map(|d| format!("{d:.1e}")).collect();
    let shrinking = diffs.windows(2).all(|w| w[1] < w[0]);

    let tiny = [[1e-10, 0.0], [0.0, 1e-10]];
    let opts = LqmmOptions { psi: PsiMode::Fixed(tiny), knots: 3, ..Default::default() };
    let mm = fit_lqmm(&ds, 0.5, &opts, None).expect("lqmm fit");
    let pooled = fit_lqm(&ds, 0.5, LqmMethod::NelderMead, &CovariateSelection::All).expect("lqm fit");
    let beta_gap = mm.params.beta.iter().zip(&pooled.beta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    verdict(
        10,
        "lqmm sanity",
        gap <= 1e-4 && shrinking && beta_gap <= 1e-3,
        start.elapsed(),
        Duration::from_secs(600),
        format!(
            "|K=33 - trapezoid| {gap:.2e} (K=13: {gap13:.2e}), K-refinement diffs {diffs_txt:?}, psi~0 beta gap {beta_gap:.2e}"
        ),
    );
}

fn write_dataset(dir: &std::path::Path, name: &str, ds: &Dataset) -> String {
    let path = dir.join(name);
    let mut f = std::fs::File::create(&path).expect("create");
    ds.write_csv(&mut f).expect("write");
    path.to_string_lossy().into_owned()
}

fn fit_report(dir: &std::path::Path, input: &str, method: &str, center: i64) -> FitReport {
    let out = dir.join(format!("{method}.json"));
    let argv: Vec<String> = [
        "phenoquant", "fit", "--method", method, "--input", input, "--out", out.to_str().expect("utf-8 path"),
        "--tau-grid", "0.1:0.9:0.1", "--min-count", "1", "--center-year", &center.to_string(),
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let cli = <Cli as clap::Parser>::try_parse_from(&argv).expect("cli");
    let Command::Fit(args) = cli.command else { unreachable!() };
    cmd_fit(&args, &argv).expect("fit")
}

#[test]
fn criterion_11_diagnostics() {
    let start = Instant::now();
    let dir = tempfile::tempdir().expect("tempdir");
    let mut spec = single_group_spec(1111, 40, 120.0, 20.0);
    spec.groups.push(GroupSpec { name: "B".into(), intercept: 135.0, slope: 0.1, scale: 4.0, count_mean: 120.0, dispersion: 20.0 });
    let shift = simulate(&spec).expect("simulate");
    let shift_path = write_dataset(dir.path(), "shift.csv", &shift);

    // quantile slopes fall with tau steeply enough for the lines to cross
    let mut rng = ChaCha8Rng::seed_from_u64(1112);
    let std_normal = NormalDist::new(0.0, 1.0).expect("normal");
    let mut obs = Vec::new();
    for t in -20i64..=19 {
        for _ in 0..150 {
            let u: f64 = rng.random_range(1e-9..1.0);
            obs.push(Observation::new("C", t, 120.0 + 5.0 * std_normal.inverse_cdf(u) + (0.6 - 1.2 * u) * t as f64));
        }
    }
    let varying = Dataset::from_raw(vec![], obs, Some(0)).expect("dataset");
    let vary_dir = dir.path().join("vary");
    std::fs::create_dir(&vary_dir).expect("mkdir");
    let vary_path = write_dataset(&vary_dir, "varying.csv", &varying);

    let mut lines = Vec::new();
    let mut pass = true;
    for method in ["eq", "qr"] {
        let r = fit_report(dir.path(), &shift_path, method, spec.center_year);
        let d = r.diagnostics.expect("diagnostics");
        pass &= d.violations_above_tol == 0 && d.crossings_above_tol == 0;
        lines.push(format!("{method} shift: {} violations, {} crossings", d.violations_above_tol, d.crossings_above_tol));
        let r = fit_report(&vary_dir, &vary_path, method, 0);
        let d = r.diagnostics.expect("diagnostics");
        pass &= d.crossings_above_tol > 0;
        lines.push(format!("{method} varying: {} crossings", d.crossings_above_tol));
    }
    verdict(11, "diagnostics", pass, start.elapsed(), Duration::from_secs(300), lines.join(", "));
}

#[test]
fn criterion_12_bootstrap_coverage() {
    let start = Instant::now();
    let metas = 200u64;
    let mut covered = 0;
    for rep in 0..metas {
        let mut rng = ChaCha8Rng::seed_from_u64(12_000 + rep);
        let mut obs = Vec::with_capacity(300);
        for t in -15i64..15 {
            for _ in 0..10 {
                let e: f64 = rng.sample(StandardNormal);
                obs.push(Observation::new("A", t, 100.0 - 0.15 * t as f64 + 5.0 * e));
            }
        }
        let ds = Dataset::from_raw(vec![], obs, Some(0)).expect("dataset");
        let plan = make_plan(ds.len(), 200, 13_000 + rep).expect("plan");
        let boot = run_shared(&ds, &[BootMethod::Qr], &[0.5], &plan).expect("bootstrap");
        let rows = boot.intervals(0.025, 0.975).expect("intervals");
        let slope = rows.iter().find(|r| r.coefficient == "year").expect("slope row");
        if slope.interval.covers(-0.15) {
            covered += 1;
        }
    }
    let rate = covered as f64 / metas as f64;
    verdict(
        12,
        "bootstrap coverage",
        (rate - 0.95).abs() <= 0.04,
        start.elapsed(),
        Duration::from_secs(900),
        format!("median slope covered in {covered} of {metas} ({:.1}%)", 100.0 * rate),
    );
}
