//! The acceptance suite. Each check runs at a given [`Sizes`]; the full sizes
//! are the published tolerances, the quick sizes are for `verify-all` smoke
//! runs.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::time::Instant;

use kse_core::coupling::{foias_prodi_check, novikov_integral, run_coupled, FpVariant};
use kse_core::criterion::{verify_criterion, GeometricToy, HypothesisConstants};
use kse_core::dynamics::{default_forcing, simulate, NoiseModel, SimParams};
use kse_core::functionals::{compute_functionals, Functional, ThresholdParams, P1};
use kse_core::mixing::{
    dual_lipschitz_distance, fit_polynomial_rate, fit_tail, lyapunov_drift, run_ensemble,
    tail_thresholds, Feature, FeatureSchema, LipschitzDictionary, TailModel, TailSample,
};
use kse_core::rng::{derive_seed, stream, StreamTag};
use kse_core::spectral::{basis_function, random_smooth_field, real_coefficient, WeightProfile};
use kse_core::stats::{linear_regression, mean, median, par_map_indexed, std_err};
use kse_core::{make_grid, Field, Result};
use rand_distr::{Distribution, Exp, Pareto};
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct CriterionOutcome {
    pub id: u32,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub metrics: BTreeMap<String, f64>,
}

impl CriterionOutcome {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} [{}] {}: {}",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sizes {
    pub moment_members: usize,
    pub fp_runs: usize,
    pub contraction_members: usize,
    pub novikov_seeds: usize,
    pub mixing_members: usize,
    pub mixing_horizon: f64,
    pub lyapunov_members: usize,
    pub ladders: usize,
    pub tail_samples: usize,
    pub tail_members: usize,
    /// Enforce the wall-clock budgets.
    pub timed: bool,
}

impl Sizes {
    pub fn full() -> Sizes {
        Sizes {
            moment_members: 256,
            fp_runs: 32,
            contraction_members: 32,
            novikov_seeds: 16,
            mixing_members: 256,
            mixing_horizon: 10.0,
            lyapunov_members: 256,
            ladders: 10_000,
            tail_samples: 4000,
            tail_members: 512,
            timed: true,
        }
    }

    /// Smaller ensembles everywhere except the mixing check, whose rate fit
    /// is too noisy with fewer members.
    pub fn quick() -> Sizes {
        Sizes {
            moment_members: 32,
            fp_runs: 4,
            contraction_members: 4,
            novikov_seeds: 4,
            mixing_members: 256,
            mixing_horizon: 10.0,
            lyapunov_members: 32,
            ladders: 2000,
            tail_samples: 1000,
            tail_members: 64,
            timed: false,
        }
    }
}

struct Check {
    id: u32,
    name: &'static str,
    metrics: BTreeMap<String, f64>,
    started: Instant,
}

impl Check {
    fn new(id: u32, name: &'static str) -> Check {
        Check {
            id,
            name,
            metrics: BTreeMap::new(),
            started: Instant::now(),
        }
    }

    fn metric(&mut self, k: &str, v: f64) {
        self.metrics.insert(k.to_string(), v);
    }

    fn done(
        self,
        passed: bool,
        detail: String,
        budget_s: Option<f64>,
        timed: bool,
    ) -> Result<CriterionOutcome> {
        let secs = self.started.elapsed().as_secs_f64();
        let within = budget_s.is_none_or(|b| !timed || secs < b);
        let detail = match budget_s {
            Some(b) if timed => format!("{detail}; {secs:.2} s (budget {b} s)"),
            _ => detail,
        };
        Ok(CriterionOutcome {
            id: self.id,
            name: self.name.to_string(),
            passed: passed && within,
            detail,
            metrics: self.metrics,
        })
    }
}

fn fail(id: u32, name: &str, e: impl std::fmt::Display) -> CriterionOutcome {
    CriterionOutcome {
        id,
        name: name.to_string(),
        passed: false,
        detail: format!("error: {e}"),
        metrics: BTreeMap::new(),
    }
}

fn guard(
    id: u32,
    name: &'static str,
    f: impl FnOnce() -> Result<CriterionOutcome>,
) -> CriterionOutcome {
    f().unwrap_or_else(|e| fail(id, name, e))
}

/// Single-mode decay under the linear flow.
pub fn linear_exactness(sizes: &Sizes) -> CriterionOutcome {
    const NAME: &str = "linear-flow exactness";
    guard(1, NAME, || {
        let mut c = Check::new(1, NAME);
        let grid = make_grid(16.0 * PI, 64)?;
        let a = 0.5;
        let mut p = SimParams::new(&grid, a, 1e-2, 10.0)?;
        p.nonlinear = false;
        p.record_every = 10;
        p.weighted_diagnostics = false;
        let mut worst: f64 = 0.0;
        for m in [1usize, 3, 7, 20] {
            let i = 2 * m - 1;
            let u0 = basis_function(&grid, i)?;
            let traj = simulate(&u0, &NoiseModel::unforced(&grid), &p)?;
            let xi = grid.wavenumbers()[m];
            let c0 = real_coefficient(&grid, u0.coefficients(), i);
            for (t, s) in traj.times.iter().zip(&traj.states) {
                let expected = c0 * (-(a + xi.powi(4)) * t).exp();
                let got = real_coefficient(&grid, s.coefficients(), i);
                worst = worst.max(((got - expected) / expected).abs());
            }
        }
        c.metric("max_rel_error", worst);
        let ok = worst <= 1e-10;
        c.done(
            ok,
            format!("max relative error {worst:.2e} (tol 1e-10)"),
            Some(1.0),
            sizes.timed,
        )
    })
}

fn bump(x: f64) -> f64 {
    4.0 * (-(x * x) / 16.0).exp() * (x / 2.0).cos() + 2.0 * (-((x - 3.0).powi(2)) / 9.0).exp()
}

/// Unforced decay `‖u(t)‖ ≤ e^{-at}‖u0‖`.
pub fn unforced_decay(sizes: &Sizes) -> CriterionOutcome {
    const NAME: &str = "unforced decay";
    guard(2, NAME, || {
        let mut c = Check::new(2, NAME);
        let grid = make_grid(16.0 * PI, 256)?;
        let a = 0.5;
        let mut p = SimParams::new(&grid, a, 1e-3, 5.0)?;
        p.weighted_diagnostics = false;
        p.record_every = 5000;
        let u0 = Field::from_fn(&grid, bump)?;
        let traj = simulate(&u0, &NoiseModel::unforced(&grid), &p)?;
        let n0 = u0.l2_norm();
        let worst = traj
            .diagnostics
            .t
            .iter()
            .zip(&traj.diagnostics.l2)
            .map(|(t, l)| l * (a * t).exp() / n0)
            .fold(0.0, f64::max);
        c.metric("max_ratio", worst);
        let ok = worst <= 1.0 + 1e-4;
        c.done(
            ok,
            format!("max ‖u‖e^(at)/‖u0‖ = {worst:.6} (tol 1 + 1e-4)"),
            Some(10.0),
            sizes.timed,
        )
    })
}

fn lab_grid() -> Result<std::sync::Arc<kse_core::Grid>> {
    make_grid(8.0 * PI, 128)
}

/// `E‖u(t)‖^{2p} ≤ e^{-pat}‖u0‖^{2p} + Ĉ` with `Ĉ` fitted at `T/2`.
pub fn moment_bound(sizes: &Sizes, seed: u64) -> CriterionOutcome {
    const NAME: &str = "moment bound";
    guard(3, NAME, || {
        let mut c = Check::new(3, NAME);
        let grid = lab_grid()?;
        let a = 1.0;
        let t_end = 8.0;
        let p = SimParams::new(&grid, a, 1e-3, t_end)?;
        let noise = NoiseModel::uniform(16, 1.0, default_forcing(&grid, 1.0)?, 0)?;
        let u0 = random_smooth_field(&grid, 5.0, &mut stream(seed, StreamTag::InitialData, 0));
        let times: Vec<f64> = (0..=32).map(|k| k as f64 * 0.25).collect();
        let schema = FeatureSchema::new(&grid, 0, &[])?;
        let run = run_ensemble(
            sizes.moment_members,
            |_| u0.clone(),
            &noise,
            seed,
            &p,
            &times,
            &schema,
        )?;
        let n0 = u0.l2_norm();
        let mut ok = run.failures.is_empty();
        let mut worst_z = f64::NEG_INFINITY;
        for pw in [1.0f64, 2.0] {
            let stats: Vec<(f64, f64)> = run
                .measures
                .iter()
                .map(|m| {
                    let v: Vec<f64> = m
                        .column(Feature::L2)
                        .iter()
                        .map(|x| x.powf(2.0 * pw))
                        .collect();
                    (mean(&v), std_err(&v))
                })
                .collect();
            let mid = times.len() / 2;
            let decay = |t: f64| (-pw * a * t).exp() * n0.powf(2.0 * pw);
            let c_hat = (stats[mid].0 - decay(times[mid])).max(0.0);
            c.metric(&format!("c_hat_p{pw}"), c_hat);
            for (k, &(m, se)) in stats.iter().enumerate() {
                let sigma = (se * se + stats[mid].1 * stats[mid].1).sqrt();
                let z = (m - decay(times[k]) - c_hat) / sigma.max(f64::MIN_POSITIVE);
                worst_z = worst_z.max(z);
                if z > 3.0 {
                    ok = false;
                }
            }
        }
        c.metric("max_z", worst_z);
        c.metric("failures", run.failures.len() as f64);
        c.done(
            ok,
            format!("largest excess {worst_z:.2} sigma (limit 3)"),
            Some(300.0),
            sizes.timed,
        )
    })
}

fn seeded_pair(grid: &std::sync::Arc<kse_core::Grid>, amp: f64, s: f64) -> Result<(Field, Field)> {
    let u0 = Field::from_fn(grid, |x| {
        amp * (-(x / 4.0).powi(2)).exp() * (x / 2.0 + s).sin()
    })?;
    let u0p = Field::from_fn(grid, |x| {
        -amp * (-(x / 5.0).powi(2)).exp() * (x / 3.0 + 2.0 * s).cos()
    })?;
    Ok((u0, u0p))
}

fn no_stop() -> ThresholdParams {
    ThresholdParams::new(1e12, 1e12, 1.0, 1e12).expect("valid")
}

/// Minimal Foiaş–Prodi constants over the dyadic lattice.
pub fn foias_prodi(sizes: &Sizes, seed: u64) -> CriterionOutcome {
    const NAME: &str = "Foias-Prodi part 1 certificate";
    guard(4, NAME, || {
        let mut c = Check::new(4, NAME);
        let grid = lab_grid()?;
        let a = 0.2;
        let mut p = SimParams::new(&grid, a, 1e-3, 5.12)?;
        p.record_every = 640;
        let n = grid.n_points();
        let th = no_stop();
        let rows: Vec<Result<(f64, f64)>> = par_map_indexed(sizes.fp_runs, |i| {
            let noise = NoiseModel::uniform(
                32,
                4.0,
                default_forcing(&grid, 0.0)?,
                derive_seed(seed, StreamTag::Forcing, i as u64),
            )?;
            let (u0, u0p) = seeded_pair(&grid, 8.0, i as f64)?;
            let run = run_coupled(&u0, &u0p, 16, &noise, &p, &th)?;
            let c16 = foias_prodi_check(&run, FpVariant::Part1, 0.0, 0.0, None)?.min_c;
            let full = run_coupled(&u0, &u0p, n, &noise, &p, &th)?;
            let cn = foias_prodi_check(&full, FpVariant::Part1, 0.0, 0.0, None)?.min_c;
            Ok((c16, cn))
        });
        let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
        let lo = rows.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r.0).fold(0.0, f64::max);
        let full = rows.iter().map(|r| r.1).fold(0.0, f64::max);
        let spread = hi / lo;
        c.metric("min_c_lo", lo);
        c.metric("min_c_hi", hi);
        c.metric("spread", spread);
        c.metric("min_c_full_projection", full);
        let ok = hi.is_finite() && lo > 0.0 && spread <= 10.0 && full <= 1e-10;
        c.done(
            ok,
            format!("N=16: C in [{lo:.3e}, {hi:.3e}], max/min {spread:.2}; N=n: max C {full:.1e}"),
            Some(300.0),
            sizes.timed,
        )
    })
}

/// Median `‖w(5)‖₁` over the ensemble for `N ∈ {8, 16, 32}`.
pub fn coupling_contraction(sizes: &Sizes, seed: u64) -> CriterionOutcome {
    const NAME: &str = "coupling contraction";
    guard(5, NAME, || {
        let mut c = Check::new(5, NAME);
        let grid = lab_grid()?;
        let mut p = SimParams::new(&grid, 1.5, 1e-3, 5.0)?;
        p.record_every = 5000;
        let th = no_stop();
        let forcing = default_forcing(&grid, 3.0)?;
        let modes = [8usize, 16, 32];
        let rows: Vec<Result<Vec<(f64, f64)>>> = par_map_indexed(sizes.contraction_members, |i| {
            let noise = NoiseModel::uniform(
                32,
                2.0,
                forcing.clone(),
                derive_seed(seed, StreamTag::Forcing, i as u64),
            )?;
            let (u0, u0p) = seeded_pair(&grid, 6.0, i as f64)?;
            modes
                .iter()
                .map(|&nm| {
                    let run = run_coupled(&u0, &u0p, nm, &noise, &p, &th)?;
                    Ok((run.w_h1[0], *run.w_h1.last().expect("nonempty")))
                })
                .collect()
        });
        let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
        let medians: Vec<f64> = (0..modes.len())
            .map(|j| median(&rows.iter().map(|r| r[j].1).collect::<Vec<_>>()))
            .collect();
        let w0 = median(&rows.iter().map(|r| r[0].0).collect::<Vec<_>>());
        for (m, v) in modes.iter().zip(&medians) {
            c.metric(&format!("median_w_N{m}"), *v);
        }
        c.metric("median_w0", w0);
        let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
        let ratio = medians[2] / w0;
        c.metric("ratio_largest_N", ratio);
        let ok = monotone && ratio <= 1e-3;
        c.done(
            ok,
            format!(
                "medians {:.3e} / {:.3e} / {:.3e}, nonincreasing {monotone}, ratio {ratio:.2e} (tol 1e-3)",
                medians[0], medians[1], medians[2]
            ),
            Some(600.0),
            sizes.timed,
        )
    })
}

/// Slope of `ln ∫‖A‖²` against `ln d`.
pub fn novikov_scaling(sizes: &Sizes, seed: u64) -> CriterionOutcome {
    const NAME: &str = "Girsanov d^2 scaling";
    guard(6, NAME, || {
        let mut c = Check::new(6, NAME);
        let grid = lab_grid()?;
        let mut p = SimParams::new(&grid, 1.0, 1e-3, 2.0)?;
        p.record_every = 2000;
        let th = no_stop();
        let forcing = default_forcing(&grid, 1.0)?;
        let ds: Vec<f64> = (1..=6).map(|k| 0.5f64.powi(k)).collect();
        let jobs = sizes.novikov_seeds * ds.len();
        let pts: Vec<Result<(f64, f64)>> = par_map_indexed(jobs, |j| {
            let (s, di) = (j / ds.len(), j % ds.len());
            let mut rng = stream(seed, StreamTag::InitialData, s as u64);
            let u0 = random_smooth_field(&grid, 3.0, &mut rng);
            let e = random_smooth_field(&grid, 1.0, &mut rng);
            let u0p = u0.add(&e.scale(ds[di]))?;
            let noise = NoiseModel::uniform(
                16,
                1.0,
                forcing.clone(),
                derive_seed(seed, StreamTag::Forcing, s as u64),
            )?;
            let run = run_coupled(&u0, &u0p, 16, &noise, &p, &th)?;
            Ok((ds[di].ln(), novikov_integral(&run).ln()))
        });
        let pts = pts.into_iter().collect::<Result<Vec<_>>>()?;
        let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        let fit = linear_regression(&xs, &ys).expect("six distinct radii");
        c.metric("slope", fit.slope);
        c.metric("r_squared", fit.r_squared);
        let ok = (fit.slope - 2.0).abs() <= 0.3;
        c.done(
            ok,
            format!(
                "slope {:.4} (target 2 ± 0.3), R² {:.4}",
                fit.slope, fit.r_squared
            ),
            None,
            sizes.timed,
        )
    })
}

/// Dual-Lipschitz distance between ensembles from `0` and from `‖u0′‖₁ = 5`.
pub fn mixing_decay(sizes: &Sizes, seed: u64) -> CriterionOutcome {
    const NAME: &str = "mixing decay";
    guard(7, NAME, || {
        let mut c = Check::new(7, NAME);
        let grid = lab_grid()?;
        let horizon = sizes.mixing_horizon;
        let p = SimParams::new(&grid, 0.5, 1e-3, horizon)?;
        let noise = NoiseModel::uniform(16, 1.0, default_forcing(&grid, 1.0)?, 0)?;
        let u0p = random_smooth_field(&grid, 5.0, &mut stream(seed, StreamTag::InitialData, 1));
        let zero = Field::zeros(&grid);
        let dt_rec = horizon / 40.0;
        let times: Vec<f64> = (0..=40).map(|k| k as f64 * dt_rec).collect();
        let schema = FeatureSchema::new(&grid, 16, &[0.0])?;
        // Common random numbers: member i uses the same forcing in both ensembles.
        let e1 = run_ensemble(
            sizes.mixing_members,
            |_| zero.clone(),
            &noise,
            seed,
            &p,
            &times,
            &schema,
        )?;
        let e2 = run_ensemble(
            sizes.mixing_members,
            |_| u0p.clone(),
            &noise,
            seed,
            &p,
            &times,
            &schema,
        )?;
        let series = e1
            .measures
            .iter()
            .zip(&e2.measures)
            .map(|(m1, m2)| {
                let dict = LipschitzDictionary::for_pair(m1, m2)?;
                Ok((m1.time, dual_lipschitz_distance(m1, m2, &dict)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let window = (0.2 * horizon, horizon);
        let fit = fit_polynomial_rate(&series, window)?;
        let tail: Vec<f64> = series
            .iter()
            .filter(|(t, _)| *t >= window.0)
            .map(|x| x.1)
            .collect();
        let decreasing = tail.windows(2).all(|w| w[1] <= w[0]);
        c.metric("p_hat", fit.p_hat);
        c.metric("c_hat", fit.c_hat);
        c.metric("r_squared", fit.r_squared);
        c.metric("exp_r_squared", fit.exp_r_squared);
        c.metric("d_start", series[0].1);
        c.metric("d_end", series.last().expect("nonempty").1);
        let ok = decreasing && fit.p_hat > 0.0 && fit.r_squared >= 0.9;
        c.done(
            ok,
            format!(
                "tail decreasing {decreasing}, p̂ {:.3}, R² {:.4} (exp-fit R² {:.4})",
                fit.p_hat, fit.r_squared, fit.exp_r_squared
            ),
            Some(1800.0),
            sizes.timed,
        )
    })
}

/// Geometric drift of `F` for large data and a uniform bound for small data.
pub fn lyapunov_regimes(sizes: &Sizes, seed: u64) -> CriterionOutcome {
    const NAME: &str = "Lyapunov two-regime check";
    guard(8, NAME, || {
        let mut c = Check::new(8, NAME);
        let grid = lab_grid()?;
        let t_star = 2.0;
        let t_end = 6.0;
        let p = SimParams::new(&grid, 1.0, 1e-3, t_end)?;
        let noise = NoiseModel::uniform(16, 1.0, default_forcing(&grid, 1.0)?, 0)?;
        let schema = FeatureSchema::new(&grid, 0, &[])?;
        let times: Vec<f64> = (0..=24).map(|k| k as f64 * 0.25).collect();
        let k_star = times.iter().position(|&t| t == t_star).expect("on grid");
        let radii = [0.0, 1.0, 2.0, 4.0, 8.0, 16.0];
        let mut ratios = Vec::new();
        let mut ensembles = Vec::new();
        for (j, &r) in radii.iter().enumerate() {
            let u0 = random_smooth_field(
                &grid,
                r,
                &mut stream(seed, StreamTag::InitialData, j as u64),
            );
            let f0 = kse_core::functionals::lyapunov_f(&u0);
            let run = run_ensemble(
                sizes.lyapunov_members,
                |_| u0.clone(),
                &noise,
                seed,
                &p,
                &times,
                &schema,
            )?;
            let drift = lyapunov_drift(&run.measures[k_star], f0);
            c.metric(&format!("ratio_upper_r{r}"), drift.ratio_upper);
            ratios.push(drift.ratio_upper);
            ensembles.push(run);
        }
        // R* is the smallest radius from which every larger one contracts.
        let first_large = (0..radii.len())
            .rev()
            .take_while(|&j| ratios[j] < 1.0)
            .last();
        let Some(js) = first_large else {
            return c.done(false, "no radius with q̂ < 1".into(), None, sizes.timed);
        };
        let r_star = radii[js];
        c.metric("r_star", r_star);
        let half = times.len() / 2;
        let mut uniform_ok = js > 0;
        let mut worst_z = f64::NEG_INFINITY;
        for run in &ensembles[..js] {
            let stats: Vec<(f64, f64)> = run
                .measures
                .iter()
                .map(|m| {
                    let v = m.lyapunov_values();
                    (mean(&v), std_err(&v))
                })
                .collect();
            let (k_fit, c_star) = stats[..half]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
                .map(|(k, s)| (k, s.0))
                .expect("nonempty");
            for &(m, se) in &stats[half..] {
                let sigma = (se * se + stats[k_fit].1.powi(2)).sqrt();
                let z = (m - c_star) / sigma;
                worst_z = worst_z.max(z);
                if z > 3.0 {
                    uniform_ok = false;
                }
            }
        }
        c.metric("uniform_max_z", worst_z);
        let q_large = ratios[js..].iter().copied().fold(0.0, f64::max);
        c.metric("q_hat_upper", q_large);
        c.done(
            uniform_ok,
            format!("R* = {r_star}, q̂ (3σ upper) ≤ {q_large:.3} beyond R*, small-data excess ≤ {worst_z:.2} sigma"),
            None,
            sizes.timed,
        )
    })
}

/// Geometric toy against its exact ladder law.
pub fn criterion_oracle(sizes: &Sizes, seed: u64) -> CriterionOutcome {
    const NAME: &str = "criterion lab oracle";
    guard(9, NAME, || {
        let mut c = Check::new(9, NAME);
        let toy = GeometricToy::new(0.5, 3, 2)?;
        let constants = HypothesisConstants {
            delta1: 0.5,
            p: 2.0,
            q: 1.0,
            c: 1.0,
            k: 1.0,
        };
        let p0 = 2.0;
        let report = verify_criterion(&toy, &constants, sizes.ladders, p0, 100_000, 8, seed)?;
        let mut in_ci = true;
        for row in &report.rows[1..] {
            let truth = 0.5f64.powi(row.k as i32);
            if truth < row.ci.0 || truth > row.ci.1 {
                in_ci = false;
            }
        }
        let oracle = toy.exact_ell_moment(p0);
        let rel = (report.ell_moment - oracle).abs() / oracle;
        c.metric("ell_moment", report.ell_moment);
        c.metric("oracle", oracle);
        c.metric("rel_error", rel);
        c.metric("censored", report.censored as f64);
        let ok = in_ci && rel <= 0.05 && report.censored == 0;
        c.done(
            ok,
            format!(
                "P(rho_k<inf) within CI for k<=8: {in_ci}; E l^2 = {:.2} vs {oracle:.2} ({:.2}%)",
                report.ell_moment,
                100.0 * rel
            ),
            Some(60.0),
            sizes.timed,
        )
    })
}

fn tail_r2(samples: &[TailSample], seed: u64) -> Result<(f64, f64)> {
    let th = tail_thresholds(samples, 20, 10)?;
    let e = fit_tail(samples, &th, TailModel::Exponential, 0, seed)?;
    let p = fit_tail(samples, &th, TailModel::Polynomial, 0, seed)?;
    Ok((e.r_squared, p.r_squared))
}

/// Tail-estimator calibration, then the exponential/polynomial dichotomy
/// on supermartingale excesses.
pub fn tail_dichotomy(sizes: &Sizes, seed: u64) -> CriterionOutcome {
    const NAME: &str = "tail-shape dichotomy";
    guard(10, NAME, || {
        let mut c = Check::new(10, NAME);
        let mut rng = stream(seed, StreamTag::TestField, 0);
        let (rate, alpha) = (1.5, 2.5);
        let exp = Exp::new(rate).expect("positive rate");
        let par = Pareto::new(1.0, alpha).expect("positive shape");
        let xs: Vec<TailSample> = (0..sizes.tail_samples)
            .map(|_| TailSample::exact(exp.sample(&mut rng)))
            .collect();
        let ys: Vec<TailSample> = (0..sizes.tail_samples)
            .map(|_| TailSample::exact(par.sample(&mut rng)))
            .collect();
        let th_x = tail_thresholds(&xs, 20, 10)?;
        let th_y = tail_thresholds(&ys, 20, 10)?;
        let fx = fit_tail(&xs, &th_x, TailModel::Exponential, 200, seed)?;
        let fy = fit_tail(&ys, &th_y, TailModel::Polynomial, 200, seed)?;
        let calibrated = fx.ci.0 <= rate && rate <= fx.ci.1 && fy.ci.0 <= alpha && alpha <= fy.ci.1;
        c.metric("exp_rate_hat", fx.slope);
        c.metric("pareto_alpha_hat", fy.slope);

        let grid = lab_grid()?;
        let t_end = 8.0;
        let mut p = SimParams::new(&grid, 1.0, 1e-3, t_end)?;
        p.record_every = 8000;
        p.record_noise = false;
        let noise = NoiseModel::uniform(16, 1.5, default_forcing(&grid, 1.0)?, 0)?;
        let weights = WeightProfile::new(&grid);
        let u0 = random_smooth_field(&grid, 2.0, &mut stream(seed, StreamTag::InitialData, 0));
        let t_offset = 2.0;
        let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = par_map_indexed(sizes.tail_members, |i| {
            let member = noise.with_seed(derive_seed(seed, StreamTag::Forcing, i as u64));
            let traj = simulate(&u0, &member, &p)?;
            let fs = compute_functionals(&traj, &weights, &[P1])?;
            Ok((
                fs.series(Functional::Energy)?.to_vec(),
                fs.series(Functional::Moment(P1))?.to_vec(),
            ))
        });
        let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
        let k0 = (t_offset / p.dt).round() as usize;
        let span = t_end - t_offset;
        // K: 95th percentile of the mean growth rate after the offset.
        let slope_quantile = |col: usize| {
            let slopes: Vec<f64> = rows
                .iter()
                .map(|r| {
                    let s = if col == 0 { &r.0 } else { &r.1 };
                    (s[s.len() - 1] - s[k0]) / span
                })
                .collect();
            kse_core::stats::quantile(&slopes, 0.95)
        };
        let (k_e, k_p) = (slope_quantile(0), slope_quantile(1));
        // sup_j [X(T + j dt) − X(T) − K j dt]
        let excess = |s: &[f64], k: f64| {
            s[k0..]
                .iter()
                .enumerate()
                .map(|(j, v)| v - s[k0] - k * j as f64 * p.dt)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let ex_e: Vec<TailSample> = rows
            .iter()
            .map(|r| TailSample::exact(excess(&r.0, k_e)))
            .collect();
        let ex_p: Vec<TailSample> = rows
            .iter()
            .map(|r| TailSample::exact(excess(&r.1, k_p)))
            .collect();
        let (e_exp, e_pol) = tail_r2(&ex_e, seed)?;
        let (p_exp, p_pol) = tail_r2(&ex_p, seed)?;
        c.metric("energy_exp_r2", e_exp);
        c.metric("energy_poly_r2", e_pol);
        c.metric("moment_exp_r2", p_exp);
        c.metric("moment_poly_r2", p_pol);
        let ok = calibrated && e_exp > e_pol && p_pol > p_exp;
        c.done(
            ok,
            format!(
                "calibration {calibrated} (rate {:.3} in [{:.3}, {:.3}], alpha {:.3} in [{:.3}, {:.3}]); E_u R² exp {e_exp:.4} vs poly {e_pol:.4}; E^p R² exp {p_exp:.4} vs poly {p_pol:.4}",
                fx.slope, fx.ci.0, fx.ci.1, fy.slope, fy.ci.0, fy.ci.1
            ),
            None,
            sizes.timed,
        )
    })
}

/// Criteria 1 to 10; determinism (11) needs two full CLI runs and lives in
/// the command layer.
pub fn run_all(sizes: &Sizes, seed: u64) -> Vec<CriterionOutcome> {
    vec![
        linear_exactness(sizes),
        unforced_decay(sizes),
        moment_bound(sizes, seed),
        foias_prodi(sizes, seed),
        coupling_contraction(sizes, seed),
        novikov_scaling(sizes, seed),
        mixing_decay(sizes, seed),
        lyapunov_regimes(sizes, seed),
        criterion_oracle(sizes, seed),
        tail_dichotomy(sizes, seed),
    ]
}
