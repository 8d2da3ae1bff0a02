//! Coupled trajectories `(u, v, u′)` driven by one noise path.
//!
//! `u` and `u′` solve (KSE) from `u0` and `u0′`; `v` starts at `u0′` and solves
//! the auxiliary equation with `P_N(uu_x − vv_x)` added, so that the low modes
//! of `w = u − v` evolve by the linear flow alone. The Girsanov drift is
//! `A = −1_{t≤τ} P_N[uu_x − vv_x]`.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dynamics::{
    auxiliary_from_parts, cumulative_trapezoid, Diagnostics, Integrator, NoiseModel, Recorder,
    SimParams, Trajectory,
};
use crate::error::{invalid, LabError, Result};
use crate::functionals::{StoppingTime, ThresholdParams, P1};
use crate::rng::{derive_seed, stream, StreamTag};
use crate::spectral::{
    real_mode, sup_norm_constant, Complex, Field, Grid, RealMode, SpectralProjector,
};
use crate::stats::{linear_regression, par_map_indexed, wilson_interval, Z95};

/// Online `E^ψ` threshold detector, matching the offline functional series
/// bit for bit.
struct PsiTracker {
    a0: f64,
    dt: f64,
    th: ThresholdParams,
    p1: f64,
    u0_l2: f64,
    int_h2: f64,
    int_psi_h2: f64,
    hit: Option<usize>,
}

impl PsiTracker {
    fn new(a: f64, dt: f64, th: ThresholdParams, p1: f64) -> PsiTracker {
        PsiTracker {
            a0: a.min(1.0),
            dt,
            th,
            p1,
            u0_l2: 0.0,
            int_h2: 0.0,
            int_psi_h2: 0.0,
            hit: None,
        }
    }

    fn update(&mut self, k: usize, d: &Diagnostics) {
        if k == 0 {
            self.u0_l2 = d.l2[0];
        } else {
            self.int_h2 += 0.5 * self.dt * (d.h2[k - 1] * d.h2[k - 1] + d.h2[k] * d.h2[k]);
            self.int_psi_h2 +=
                0.5 * self.dt * (d.psi_h2[k - 1] * d.psi_h2[k - 1] + d.psi_h2[k] * d.psi_h2[k]);
        }
        if self.hit.is_none() {
            let e =
                d.l2[k].powi(2) + d.psi_l2[k].powi(2) + self.a0 * (self.int_h2 + self.int_psi_h2);
            let t = k as f64 * self.dt;
            if e >= self.th.threshold(t, self.u0_l2, self.p1) {
                self.hit = Some(k);
            }
        }
    }
}

struct Lane {
    hat: Vec<Complex>,
    nl: Vec<Complex>,
    rec: Recorder,
    tracker: PsiTracker,
}

/// Lockstep stepper for `(u, v, u′)`.
pub(crate) struct Engine {
    integ: Integrator,
    proj: SpectralProjector,
    grid: Arc<Grid>,
    steps: usize,
    record_every: usize,
    u: Lane,
    v: Lane,
    up: Lane,
    rng: ChaCha8Rng,
    fresh: Option<ChaCha8Rng>,
    k: usize,
    v_eff: Vec<Complex>,
    drift: Vec<Complex>,
    dw: Vec<Complex>,
    incr: Vec<f64>,
    w_l2: Vec<f64>,
    w_h1: Vec<f64>,
    up_dist: Vec<f64>,
    drift_sq: Vec<f64>,
    drift_fields: Vec<Field>,
}

impl Engine {
    pub(crate) fn new(
        u0: &Field,
        u0_prime: &Field,
        n_modes: usize,
        noise: &NoiseModel,
        params: &SimParams,
        th: &ThresholdParams,
    ) -> Result<Engine> {
        u0.same_grid(u0_prime)?;
        if !u0.grid().same_as(&params.grid) {
            return Err(LabError::GridMismatch);
        }
        th.validate()?;
        let n = params.grid.n_points();
        if n_modes > n {
            return Err(invalid(
                "N",
                format!("projector size {n_modes} exceeds mode count {n}"),
            ));
        }
        let mut params = params.clone();
        params.weighted_diagnostics = true;
        let integ = Integrator::new(&params, noise)?;
        let zero = Complex::new(0.0, 0.0);
        let lane = |f: &Field| Lane {
            hat: f.coefficients().to_vec(),
            nl: vec![zero; n],
            rec: Recorder::new(&params, noise),
            tracker: PsiTracker::new(params.a, params.dt, *th, P1),
        };
        let mut engine = Engine {
            proj: SpectralProjector::new(n_modes),
            grid: Arc::clone(&params.grid),
            steps: params.steps(),
            record_every: params.record_every,
            u: lane(u0),
            v: lane(u0_prime),
            up: lane(u0_prime),
            rng: noise.rng(),
            fresh: None,
            k: 0,
            v_eff: vec![zero; n],
            drift: vec![zero; n],
            dw: vec![zero; n],
            incr: vec![0.0; integ.noise_modes()],
            w_l2: Vec::with_capacity(params.steps() + 1),
            w_h1: Vec::with_capacity(params.steps() + 1),
            up_dist: Vec::with_capacity(params.steps() + 1),
            drift_sq: Vec::with_capacity(params.steps() + 1),
            drift_fields: Vec::new(),
            integ,
        };
        engine.observe()?;
        Ok(engine)
    }

    pub(crate) fn steps(&self) -> usize {
        self.steps
    }

    pub(crate) fn tau_step(&self) -> Option<usize> {
        [self.u.tracker.hit, self.v.tracker.hit, self.up.tracker.hit]
            .into_iter()
            .flatten()
            .min()
    }

    /// Switch `u′` to an independent noise stream from the next step on.
    pub(crate) fn decouple(&mut self, rng: ChaCha8Rng) {
        self.fresh = Some(rng);
    }

    fn observe(&mut self) -> Result<()> {
        let k = self.k;
        for lane in [&mut self.u, &mut self.v, &mut self.up] {
            lane.rec.record(k, &lane.hat)?;
            lane.tracker.update(k, lane.rec.diagnostics());
            self.integ.nonlinear_hat(&lane.hat, &mut lane.nl);
        }
        let two_l = 2.0 * self.grid.half_length();
        let (mut l2, mut h1, mut dist) = (0.0, 0.0, 0.0);
        for (j, &xi) in self.grid.wavenumbers().iter().enumerate() {
            let m = (self.u.hat[j] - self.v.hat[j]).norm_sqr();
            l2 += m;
            h1 += (1.0 + xi * xi) * m;
            dist += (self.u.hat[j] - self.up.hat[j]).norm_sqr();
        }
        self.w_l2.push((two_l * l2).sqrt());
        self.w_h1.push((two_l * h1).sqrt());
        self.up_dist.push((two_l * dist).sqrt());

        auxiliary_from_parts(
            &self.grid,
            &self.u.nl,
            &self.v.nl,
            &self.proj,
            &mut self.v_eff,
        );
        let active = self.tau_step().is_none_or(|t| k <= t);
        let mut sq = 0.0;
        for j in 0..self.drift.len() {
            self.drift[j] = if active {
                // A = −P_N[N(u) − N(v)] = N(v) − (Q_N N(v) + P_N N(u)).
                self.v.nl[j] - self.v_eff[j]
            } else {
                Complex::new(0.0, 0.0)
            };
            sq += self.drift[j].norm_sqr();
        }
        self.drift_sq.push(two_l * sq);
        if k.is_multiple_of(self.record_every) || k == self.steps {
            self.drift_fields
                .push(Field::from_spectral(&self.grid, self.drift.clone())?);
        }
        Ok(())
    }

    fn advance(&mut self) -> Result<()> {
        self.integ.draw_increments(&mut self.rng, &mut self.incr);
        self.integ.noise_hat(&self.incr, &mut self.dw);
        self.u.rec.log_noise(&self.incr, &self.u.hat);
        self.v.rec.log_noise(&self.incr, &self.v.hat);
        self.integ.advance(&mut self.u.hat, &self.u.nl, &self.dw);
        self.integ.advance(&mut self.v.hat, &self.v_eff, &self.dw);
        match self.fresh.as_mut() {
            None => {
                self.up.rec.log_noise(&self.incr, &self.up.hat);
                self.integ.advance(&mut self.up.hat, &self.up.nl, &self.dw);
            }
            Some(rng) => {
                let mut incr = vec![0.0; self.incr.len()];
                self.integ.draw_increments(rng, &mut incr);
                let mut dw = vec![Complex::new(0.0, 0.0); self.dw.len()];
                self.integ.noise_hat(&incr, &mut dw);
                self.up.rec.log_noise(&incr, &self.up.hat);
                self.integ.advance(&mut self.up.hat, &self.up.nl, &dw);
            }
        }
        self.k += 1;
        self.observe()
    }

    pub(crate) fn run_to(&mut self, k: usize) -> Result<()> {
        while self.k < k.min(self.steps) {
            self.advance()?;
        }
        Ok(())
    }

    pub(crate) fn finish(self, n_modes: usize, b_min: f64) -> CoupledRun {
        let dt = self.integ.dt();
        let horizon = self.k as f64 * dt;
        let to_stop = |hit: Option<usize>| match hit {
            Some(k) => StoppingTime::Hit { t: k as f64 * dt },
            None => StoppingTime::Censored { horizon },
        };
        let tau_u = to_stop(self.u.tracker.hit);
        let tau_v = to_stop(self.v.tracker.hit);
        let tau_u_prime = to_stop(self.up.tracker.hit);
        CoupledRun {
            n_modes,
            a: self.integ.a(),
            dt,
            b_min,
            tau: tau_u.min(tau_v).min(tau_u_prime),
            tau_u,
            tau_v,
            tau_u_prime,
            u: self.u.rec.finish(),
            v: self.v.rec.finish(),
            u_prime: self.up.rec.finish(),
            w_l2: self.w_l2,
            w_h1: self.w_h1,
            u_prime_distance: self.up_dist,
            drift_sq: self.drift_sq,
            drift_fields: self.drift_fields,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoupledRun {
    pub n_modes: usize,
    pub a: f64,
    pub dt: f64,
    /// Smallest `|b_i|` among the first `N` modes.
    pub b_min: f64,
    pub u: Trajectory,
    pub v: Trajectory,
    pub u_prime: Trajectory,
    /// `‖u − v‖` and `‖u − v‖₁` per step.
    pub w_l2: Vec<f64>,
    pub w_h1: Vec<f64>,
    /// `‖u − u′‖` per step.
    pub u_prime_distance: Vec<f64>,
    /// `‖A(t)‖²` per step, zero after `τ`.
    pub drift_sq: Vec<f64>,
    drift_fields: Vec<Field>,
    pub tau_u: StoppingTime,
    pub tau_v: StoppingTime,
    pub tau_u_prime: StoppingTime,
    pub tau: StoppingTime,
}

impl CoupledRun {
    pub fn times(&self) -> &[f64] {
        &self.u.diagnostics.t
    }

    /// Running Novikov integral `∫₀^{t∧τ} ‖A‖²`.
    pub fn novikov_series(&self) -> Vec<f64> {
        let end = match self.tau.time() {
            Some(t) => ((t / self.dt).round() as usize).min(self.drift_sq.len() - 1),
            None => self.drift_sq.len() - 1,
        };
        let mut cum = cumulative_trapezoid(&self.drift_sq[..=end], self.dt);
        let last = cum[end];
        cum.resize(self.drift_sq.len(), last);
        cum
    }
}

/// Run `u`, `v` and `u′` in lockstep over `params.t_end`.
pub fn run_coupled(
    u0: &Field,
    u0_prime: &Field,
    n_modes: usize,
    noise: &NoiseModel,
    params: &SimParams,
    th: &ThresholdParams,
) -> Result<CoupledRun> {
    let mut engine = Engine::new(u0, u0_prime, n_modes, noise, params, th)?;
    engine.run_to(engine.steps())?;
    Ok(engine.finish(n_modes, noise.b_min(n_modes)))
}

/// The drift field at a recorded time; zero after `τ`.
pub fn girsanov_drift(run: &CoupledRun, t: f64) -> Result<Field> {
    let k = run
        .u
        .step_index(t)
        .ok_or_else(|| invalid("t", format!("{t} is not on the step grid")))?;
    let every = run.u.record_every;
    let idx = if k % every == 0 {
        k / every
    } else if k == run.u.steps {
        run.drift_fields.len() - 1
    } else {
        return Err(invalid("t", format!("{t} is not a recorded time")));
    };
    Ok(run.drift_fields[idx].clone())
}

/// `∫₀^τ ‖A(t)‖² dt` by the trapezoid rule.
pub fn novikov_integral(run: &CoupledRun) -> f64 {
    run.novikov_series().last().copied().unwrap_or(0.0)
}

/// `½[(exp(6 b_min^{-2} x))^{1/2} − 1]^{1/2}`, clamped to `[0, 1]`.
pub fn tv_bound(novikov_value: f64, b_min: f64) -> Result<f64> {
    if !(novikov_value >= 0.0) {
        return Err(invalid("novikov_value", "must be nonnegative"));
    }
    if !(b_min.is_finite() && b_min > 0.0) {
        return Err(invalid(
            "b_min",
            "the first N noise coefficients must all be nonzero",
        ));
    }
    let x = 3.0 * novikov_value / (b_min * b_min);
    Ok((0.5 * x.exp_m1().sqrt()).min(1.0))
}

/// Constant `C` in `‖A‖ ≤ C‖w‖₁(‖u‖₁ + ‖v‖₁)`, from
/// `‖P_N ∂_x g‖ ≤ ξ_N ‖g‖` and `‖f‖_∞ ≤ (Σ_k (1+ξ_k²)^{-1} / 2L)^{1/2} ‖f‖₁`.
pub fn drift_bound_constant(grid: &Grid, n_modes: usize) -> f64 {
    if n_modes == 0 {
        return 0.0;
    }
    let n = grid.n_points();
    let xi_max = match real_mode(n_modes.min(n) - 1, n) {
        RealMode::Constant => 0.0,
        RealMode::Cos(m) | RealMode::Sin(m) => grid.wavenumbers()[m],
        RealMode::Nyquist => grid.max_wavenumber(),
    };
    0.5 * xi_max * sup_norm_constant(grid)
}

/// Per-step `(‖A‖, C‖w‖₁(‖u‖₁ + ‖v‖₁))`.
pub fn drift_bound_series(run: &CoupledRun) -> Vec<(f64, f64)> {
    let c = drift_bound_constant(&run.u.grid, run.n_modes);
    run.drift_sq
        .iter()
        .zip(&run.w_h1)
        .zip(run.u.diagnostics.h1.iter().zip(&run.v.diagnostics.h1))
        .map(|((a, w), (u, v))| (a.sqrt(), c * w * (u + v)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FpVariant {
    Part1,
    Part2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FpPair {
    pub s: f64,
    pub t: f64,
    /// `ln(‖w(t)‖₁²/‖w(s)‖₁²) + a(t − s)`
    pub log_excess: f64,
    pub integral: f64,
    /// Smallest admissible constant for this pair (`+∞` if none).
    pub c_needed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FpReport {
    pub variant: FpVariant,
    pub pairs: Vec<FpPair>,
    /// Smallest constant that makes every sampled pair hold.
    pub min_c: f64,
    pub configured_c: Option<f64>,
    pub certificate: Option<bool>,
}

/// Dyadic lattice on `[first, last]` step indices: `base` steps per cell, at
/// most 128 cells, all aligned dyadic intervals (≤ 255 pairs).
pub fn dyadic_lattice(first: usize, last: usize) -> Vec<(usize, usize)> {
    if last <= first {
        return Vec::new();
    }
    let span = last - first;
    let cells = span.min(128);
    let base = span / cells;
    let mut pairs = Vec::new();
    let mut g = 1;
    while g <= cells {
        let mut i = 0;
        while i + g <= cells {
            pairs.push((first + i * base, first + (i + g) * base));
            i += g;
        }
        g *= 2;
    }
    pairs
}

/// Minimal Foiaş–Prodi constants over the dyadic lattice of `(s, t)` pairs.
///
/// Part 1 uses `‖u‖₁² + ‖v‖₁²` from `t = 0`. Part 2 uses
/// `ε(‖u‖₂² + ‖v‖₂² + ‖ψu‖₁² + ‖ψv‖₁²)` after the burn-in `T_burn`.
pub fn foias_prodi_check(
    run: &CoupledRun,
    variant: FpVariant,
    eps: f64,
    t_burn: f64,
    configured_c: Option<f64>,
) -> Result<FpReport> {
    let du = &run.u.diagnostics;
    let dv = &run.v.diagnostics;
    let (first, integrand): (usize, Vec<f64>) = match variant {
        FpVariant::Part1 => (
            0,
            du.h1
                .iter()
                .zip(&dv.h1)
                .map(|(a, b)| a * a + b * b)
                .collect(),
        ),
        FpVariant::Part2 => {
            if !(t_burn > 0.0) {
                return Err(invalid("T_burn", "burn-in must be positive for part 2"));
            }
            if !(eps > 0.0) {
                return Err(invalid("eps", "must be positive"));
            }
            let first = run
                .u
                .step_index(t_burn)
                .ok_or_else(|| invalid("T_burn", "burn-in must lie on the step grid"))?;
            (
                first,
                (0..du.len())
                    .map(|k| {
                        eps * (du.h2[k].powi(2)
                            + dv.h2[k].powi(2)
                            + du.psi_h1[k].powi(2)
                            + dv.psi_h1[k].powi(2))
                    })
                    .collect(),
            )
        }
    };
    let cum = cumulative_trapezoid(&integrand, run.dt);
    let last = run.w_h1.len() - 1;
    let pairs: Vec<FpPair> = dyadic_lattice(first, last)
        .into_iter()
        .map(|(i, j)| {
            let (s, t) = (i as f64 * run.dt, j as f64 * run.dt);
            let (ws, wt) = (run.w_h1[i], run.w_h1[j]);
            let integral = cum[j] - cum[i];
            let (log_excess, c_needed) = if ws == 0.0 {
                // w(s) = 0 forces w ≡ 0 afterwards; both sides vanish.
                (
                    f64::NEG_INFINITY,
                    if wt == 0.0 { 0.0 } else { f64::INFINITY },
                )
            } else if wt == 0.0 {
                (f64::NEG_INFINITY, 0.0)
            } else {
                let le = (wt * wt / (ws * ws)).ln() + run.a * (t - s);
                let c = if le <= 0.0 {
                    0.0
                } else if integral > 0.0 {
                    le / integral
                } else {
                    f64::INFINITY
                };
                (le, c)
            };
            FpPair {
                s,
                t,
                log_excess,
                integral,
                c_needed,
            }
        })
        .collect();
    let min_c = pairs.iter().map(|p| p.c_needed).fold(0.0, f64::max);
    Ok(FpReport {
        variant,
        min_c,
        configured_c,
        certificate: configured_c.map(|c| min_c <= c),
        pairs,
    })
}

/// Default `ε = a a₀ / (4 C_* (K + L))`.
pub fn default_fp_eps(a: f64, c_star: f64, th: &ThresholdParams) -> f64 {
    a * a.min(1.0) / (4.0 * c_star * (th.k + th.l))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoupledBy {
    Threshold,
    GirsanovSurrogate,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SqueezingRecord {
    /// `σ = τ̃ ∧ σ₁`; `None` when not reached within the horizon.
    pub sigma: Option<f64>,
    pub decoupled_by: DecoupledBy,
    /// Window containing `σ`.
    pub window_index: Option<usize>,
    pub initial_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct SqueezeConfig {
    pub n_modes: usize,
    pub t_window: f64,
    /// Radius `d` of the ball the initial pairs are drawn from (in `‖·‖₁`).
    pub d: f64,
    pub pairs: usize,
    /// Exponent in `E[1_{σ<∞} σ^p]`.
    pub moment_p: f64,
    /// Optional squeeze monitor `‖u − u′‖ ≥ C(t+1)^{−p}`.
    pub distance_threshold: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SqueezeRow {
    pub k: usize,
    pub p_q1: f64,
    pub p_q1_ci: (f64, f64),
    pub p_q2: f64,
    pub p_q2_ci: (f64, f64),
    pub censored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SqueezeTable {
    pub rows: Vec<SqueezeRow>,
    pub all_censored: bool,
    pub pairs: usize,
    pub sigma_infinite: usize,
    pub p_sigma_inf: f64,
    pub p_sigma_inf_ci: (f64, f64),
    /// Lower Wilson bound on `P(σ = ∞)`.
    pub delta1_hat: f64,
    pub sigma_moment: f64,
    pub q_hat: Option<f64>,
    pub c_hat: Option<f64>,
    pub records: Vec<SqueezingRecord>,
}

/// One squeezing attempt: window by window, the threshold time `τ̃` and the
/// surrogate decoupling time `σ₁` (window start, with probability equal to
/// the window's TV bound).
#[allow(clippy::too_many_arguments)]
pub fn squeeze_once(
    u0: &Field,
    u0_prime: &Field,
    cfg: &SqueezeConfig,
    noise: &NoiseModel,
    params: &SimParams,
    th: &ThresholdParams,
    surrogate_rng: &mut ChaCha8Rng,
    decoupled_rng: ChaCha8Rng,
) -> Result<SqueezingRecord> {
    let b_min = noise.b_min(cfg.n_modes);
    let per_window = (cfg.t_window / params.dt).round() as usize;
    if per_window == 0 {
        return Err(invalid("T_window", "window shorter than one step"));
    }
    let mut engine = Engine::new(u0, u0_prime, cfg.n_modes, noise, params, th)?;
    let windows = engine.steps() / per_window;
    let dt = params.dt;
    let d0 = u0.sub(u0_prime)?.sobolev_norm(1.0);
    let mut decoupled_rng = Some(decoupled_rng);
    for k in 0..windows {
        let (start, end) = (k * per_window, (k + 1) * per_window);
        engine.run_to(end)?;
        let mut hit = engine
            .tau_step()
            .filter(|&s| s <= end)
            .map(|s| s as f64 * dt);
        if let Some((c, p)) = cfg.distance_threshold {
            let crossing = (start..=end)
                .find(|&j| engine.up_dist[j] >= c * (j as f64 * dt + 1.0).powf(-p))
                .map(|j| j as f64 * dt);
            hit = match (hit, crossing) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            };
        }
        let window_sq = &engine.drift_sq[start..=end];
        let nov = cumulative_trapezoid(window_sq, dt)
            .last()
            .copied()
            .unwrap_or(0.0);
        let tv = if nov == 0.0 {
            0.0
        } else {
            tv_bound(nov, b_min)?
        };
        let draw: f64 = surrogate_rng.random();
        let sigma1 = (draw < tv).then_some(start as f64 * dt);
        let (sigma, by) = match (hit, sigma1) {
            (Some(h), Some(s1)) if s1 < h => (Some(s1), DecoupledBy::GirsanovSurrogate),
            (Some(h), _) => (Some(h), DecoupledBy::Threshold),
            (None, Some(s1)) => (Some(s1), DecoupledBy::GirsanovSurrogate),
            (None, None) => (None, DecoupledBy::None),
        };
        if let Some(sigma) = sigma {
            if by == DecoupledBy::GirsanovSurrogate {
                if let Some(rng) = decoupled_rng.take() {
                    engine.decouple(rng);
                }
            }
            return Ok(SqueezingRecord {
                sigma: Some(sigma),
                decoupled_by: by,
                window_index: Some(k),
                initial_distance: d0,
            });
        }
    }
    Ok(SqueezingRecord {
        sigma: None,
        decoupled_by: DecoupledBy::None,
        window_index: None,
        initial_distance: d0,
    })
}

/// Squeezing statistics over `cfg.pairs` initial pairs drawn from
/// `B̄(0,d) × B̄(0,d)`.
pub fn squeezing_stats(
    cfg: &SqueezeConfig,
    noise: &NoiseModel,
    params: &SimParams,
    th: &ThresholdParams,
    master_seed: u64,
) -> Result<SqueezeTable> {
    if cfg.pairs == 0 {
        return Err(invalid("pairs", "need at least one pair"));
    }
    if !(cfg.t_window > 0.0) {
        return Err(invalid("T_window", "must be positive"));
    }
    let grid = &params.grid;
    let records: Vec<Result<SqueezingRecord>> = par_map_indexed(cfg.pairs, |i| {
        let i = i as u64;
        let mut init = stream(master_seed, StreamTag::InitialData, i);
        let r1 = cfg.d * init.random::<f64>();
        let r2 = cfg.d * init.random::<f64>();
        let u0 = crate::spectral::random_smooth_field(grid, r1, &mut init);
        let u0p = crate::spectral::random_smooth_field(grid, r2, &mut init);
        let member_noise = noise.with_seed(derive_seed(master_seed, StreamTag::Forcing, i));
        let mut sur = stream(master_seed, StreamTag::Surrogate, i);
        let dec = stream(master_seed, StreamTag::Decoupled, i);
        squeeze_once(&u0, &u0p, cfg, &member_noise, params, th, &mut sur, dec)
    });
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(summarize_squeeze(cfg, params.t_end, records))
}

fn summarize_squeeze(
    cfg: &SqueezeConfig,
    horizon: f64,
    records: Vec<SqueezingRecord>,
) -> SqueezeTable {
    let m = records.len();
    let windows = (horizon / cfg.t_window + 1e-9).floor() as usize;
    let mut rows = Vec::new();
    for k in 0..windows {
        let lo = k as f64 * cfg.t_window;
        let hi = (k + 2) as f64 * cfg.t_window;
        let in_range =
            |r: &&SqueezingRecord| r.sigma.is_some_and(|s| s >= lo - 1e-12 && s <= hi + 1e-12);
        let q1 = records
            .iter()
            .filter(in_range)
            .filter(|r| r.decoupled_by == DecoupledBy::Threshold)
            .count();
        let q2 = records
            .iter()
            .filter(in_range)
            .filter(|r| r.decoupled_by == DecoupledBy::GirsanovSurrogate)
            .count();
        rows.push(SqueezeRow {
            k,
            p_q1: q1 as f64 / m as f64,
            p_q1_ci: wilson_interval(q1, m, Z95),
            p_q2: q2 as f64 / m as f64,
            p_q2_ci: wilson_interval(q2, m, Z95),
            censored: hi > horizon + 1e-9,
        });
    }
    let inf = records.iter().filter(|r| r.sigma.is_none()).count();
    let ci = wilson_interval(inf, m, Z95);
    let sigma_moment = records
        .iter()
        .filter_map(|r| r.sigma)
        .map(|s| s.powf(cfg.moment_p))
        .sum::<f64>()
        / m as f64;
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| !r.censored && r.p_q1.max(r.p_q2) > 0.0)
        .map(|r| (((r.k + 2) as f64).ln(), r.p_q1.max(r.p_q2).ln()))
        .unzip();
    let q_hat = linear_regression(&xs, &ys).map(|f| -f.slope);
    let c_hat = q_hat.map(|q| {
        rows.iter()
            .filter(|r| !r.censored)
            .map(|r| r.p_q1.max(r.p_q2) * ((r.k + 2) as f64).powf(q))
            .fold(0.0, f64::max)
    });
    SqueezeTable {
        all_censored: rows.iter().all(|r| r.censored),
        rows,
        pairs: m,
        sigma_infinite: inf,
        p_sigma_inf: inf as f64 / m as f64,
        p_sigma_inf_ci: ci,
        delta1_hat: ci.0,
        sigma_moment,
        q_hat,
        c_hat,
        records,
    }
}

/// Helper for experiments that need a fresh `u0′ = u0 + d e` with a random
/// unit direction `e` in `‖·‖₁`.
pub fn perturb(u0: &Field, d: f64, rng: &mut impl Rng) -> Result<Field> {
    let e = crate::spectral::random_smooth_field(u0.grid(), 1.0, rng);
    u0.add(&e.scale(d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::make_grid;

    #[test]
    fn tv_bound_closed_forms() {
        assert_eq!(tv_bound(0.0, 1.0).unwrap(), 0.0);
        let b = 0.7;
        let x = 4f64.ln() / 6.0 * b * b;
        assert!((tv_bound(x, b).unwrap() - 0.5).abs() < 1e-14);
        assert!(tv_bound(1.0, 0.0).is_err());
        assert_eq!(tv_bound(1e6, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn dyadic_lattice_size() {
        let pairs = dyadic_lattice(0, 5120);
        assert_eq!(pairs.len(), 255);
        assert!(pairs.iter().all(|(s, t)| s < t && *t <= 5120));
        assert_eq!(dyadic_lattice(0, 3).len(), 3 + 1);
    }

    fn setup() -> (Field, Field, NoiseModel, SimParams) {
        let g = make_grid(8.0, 64).unwrap();
        let u0 = Field::from_fn(&g, |x| 2.0 * (x / 2.0).sin()).unwrap();
        let u0p = Field::from_fn(&g, |x| 1.5 * (x / 4.0).cos()).unwrap();
        let noise = NoiseModel::uniform(
            8,
            0.5,
            crate::dynamics::default_forcing(&g, 1.0).unwrap(),
            9,
        )
        .unwrap();
        let mut p = SimParams::new(&g, 1.0, 1e-3, 0.5).unwrap();
        p.record_every = 50;
        (u0, u0p, noise, p)
    }

    #[test]
    fn full_projection_makes_w_linear() {
        let (u0, u0p, noise, p) = setup();
        let th = ThresholdParams::new(1e9, 1e9, 1.0, 0.0).unwrap();
        let run = run_coupled(&u0, &u0p, 64, &noise, &p, &th).unwrap();
        let w0 = u0.sub(&u0p).unwrap();
        let exact = crate::dynamics::linear_flow_hat(&p.grid, p.a, w0.coefficients(), p.t_end);
        let exact = Field::from_coefficients(&p.grid, exact).unwrap();
        let got = run.u.final_state().sub(run.v.final_state()).unwrap();
        assert!(got.sub(&exact).unwrap().l2_norm() < 1e-10 * (1.0 + exact.l2_norm()));
    }

    #[test]
    fn equal_data_gives_identical_lanes() {
        let (u0, _, noise, p) = setup();
        let th = ThresholdParams::new(1e9, 1e9, 1.0, 0.0).unwrap();
        let run = run_coupled(&u0, &u0, 8, &noise, &p, &th).unwrap();
        assert_eq!(run.u.final_state().samples(), run.v.final_state().samples());
        assert!(run.drift_sq.iter().all(|&x| x == 0.0));
        assert_eq!(novikov_integral(&run), 0.0);
    }

    #[test]
    fn drift_respects_bound() {
        let (u0, u0p, noise, p) = setup();
        let th = ThresholdParams::new(1e9, 1e9, 1.0, 0.0).unwrap();
        let run = run_coupled(&u0, &u0p, 8, &noise, &p, &th).unwrap();
        for (a, b) in drift_bound_series(&run) {
            assert!(a <= b * (1.0 + 1e-12));
        }
        assert!(girsanov_drift(&run, 0.25).is_ok());
        assert!(girsanov_drift(&run, 0.2505).is_err());
    }

    #[test]
    fn drift_constant_vanishes_without_projection() {
        let g = make_grid(8.0, 32).unwrap();
        assert_eq!(drift_bound_constant(&g, 0), 0.0);
        assert!(drift_bound_constant(&g, 5) > 0.0);
    }
}
