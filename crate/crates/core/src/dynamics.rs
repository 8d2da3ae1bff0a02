//! Time integration of the damped stochastic KSE.
//!
//! One step of size `dt` is the exponential Euler update
//!
//! ```text
//! û ← e^{-λdt} û + φ₁(λ, dt) (ĥ - N̂(u)) + ΔŴ,    λ = a + ξ⁴,  φ₁ = (1 - e^{-λdt})/λ
//! ```
//!
//! with `N(u) = ½(u²)_x` evaluated pseudo-spectrally and the Brownian increment
//! added after the semigroup factor. The linear part is exact, so a zero-noise,
//! zero-nonlinearity run reproduces `e^{-λt}` to rounding.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{invalid, LabError, Result};
use crate::rng::{stream, StreamTag};
use crate::spectral::{
    basis_coefficients, real_coefficient, Complex, Field, Grid, ProjectionSide, SpectralProjector,
    WeightProfile,
};

/// Default blow-up guard on `‖u‖₁`.
pub const BLOWUP_GUARD: f64 = 1e6;

/// Forcing specification: `W(t) = Σ b_i β_i(t) e_i` plus a deterministic `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    coefficients: Vec<f64>,
    forcing: Field,
    seed: u64,
}

impl NoiseModel {
    /// `coefficients[i]` multiplies the real basis element with index `i`.
    pub fn new(coefficients: Vec<f64>, forcing: Field, seed: u64) -> Result<NoiseModel> {
        let n = forcing.grid().n_points();
        if coefficients.len() > n {
            return Err(invalid(
                "b",
                format!(
                    "{} noise modes exceed grid mode count {n}",
                    coefficients.len()
                ),
            ));
        }
        if coefficients.iter().any(|b| !b.is_finite()) {
            return Err(invalid("b", "noise coefficients must be finite"));
        }
        let mut coefficients = coefficients;
        while coefficients.last() == Some(&0.0) {
            coefficients.pop();
        }
        Ok(NoiseModel {
            coefficients,
            forcing,
            seed,
        })
    }

    /// `b ≡ 0`, `h = 0`.
    pub fn unforced(grid: &Arc<Grid>) -> NoiseModel {
        NoiseModel {
            coefficients: Vec::new(),
            forcing: Field::zeros(grid),
            seed: 0,
        }
    }

    /// `modes` equal coefficients of size `amplitude`.
    pub fn uniform(modes: usize, amplitude: f64, forcing: Field, seed: u64) -> Result<NoiseModel> {
        NoiseModel::new(vec![amplitude; modes], forcing, seed)
    }

    pub fn with_seed(&self, seed: u64) -> NoiseModel {
        NoiseModel {
            seed,
            ..self.clone()
        }
    }

    pub fn with_forcing(&self, forcing: Field) -> NoiseModel {
        NoiseModel {
            forcing,
            ..self.clone()
        }
    }

    pub fn without_noise(&self) -> NoiseModel {
        NoiseModel {
            coefficients: Vec::new(),
            ..self.clone()
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.forcing.grid()
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn forcing(&self) -> &Field {
        &self.forcing
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of leading modes carrying a (possibly zero) coefficient; the
    /// RNG draws one normal per active mode per step.
    pub fn active_modes(&self) -> usize {
        self.coefficients.len()
    }

    pub fn b1(&self) -> f64 {
        self.coefficients.iter().map(|b| b * b).sum()
    }

    /// `Σ b_i² ‖φ e_i‖²`.
    pub fn b2(&self, weights: &WeightProfile) -> f64 {
        let grid = self.grid();
        let dx = grid.dx();
        self.coefficients
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != 0.0)
            .map(|(i, b)| {
                let e = crate::spectral::basis_function(grid, i).expect("index in range");
                let s: f64 = e
                    .samples()
                    .iter()
                    .zip(weights.phi_values())
                    .map(|(v, p)| (v * p) * (v * p))
                    .sum();
                b * b * dx * s
            })
            .sum()
    }

    /// `Σ b_i² ‖e_i‖₃²`.
    pub fn b3(&self) -> f64 {
        let grid = self.grid();
        self.coefficients
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let e = crate::spectral::basis_function(grid, i).expect("index in range");
                b * b * e.sobolev_norm(3.0).powi(2)
            })
            .sum()
    }

    /// Smallest `|b_i|` among the first `n_modes` basis elements (0 if any of
    /// them is unforced).
    pub fn b_min(&self, n_modes: usize) -> f64 {
        (0..n_modes)
            .map(|i| self.coefficients.get(i).copied().unwrap_or(0.0).abs())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_noiseless(&self) -> bool {
        self.coefficients.is_empty()
    }

    pub(crate) fn rng(&self) -> ChaCha8Rng {
        stream(self.seed, StreamTag::Forcing, 0)
    }
}

/// Smooth bump `amplitude · exp(-x²/4)`; `φh` is square integrable.
pub fn default_forcing(grid: &Arc<Grid>, amplitude: f64) -> Result<Field> {
    Field::from_fn(grid, |x| amplitude * (-0.25 * x * x).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    pub grid: Arc<Grid>,
    pub a: f64,
    pub dt: f64,
    pub t_end: f64,
    pub dealias: bool,
    /// Drop `uu_x` entirely; used for linear reference runs.
    pub nonlinear: bool,
    /// Keep every `record_every`-th state (diagnostics are kept every step).
    pub record_every: usize,
    pub blowup_guard: f64,
    pub record_noise: bool,
    /// Compute the `ψ`-weighted diagnostics (three extra transforms per step).
    pub weighted_diagnostics: bool,
}

impl SimParams {
    pub fn new(grid: &Arc<Grid>, a: f64, dt: f64, t_end: f64) -> Result<SimParams> {
        let p = SimParams {
            grid: Arc::clone(grid),
            a,
            dt,
            t_end,
            dealias: true,
            nonlinear: true,
            record_every: 1,
            blowup_guard: BLOWUP_GUARD,
            record_noise: true,
            weighted_diagnostics: true,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.a > 0.0) {
            return Err(invalid(
                "a",
                format!("damping must be positive, got {}", self.a),
            ));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(invalid(
                "dt",
                format!("time step must be positive, got {}", self.dt),
            ));
        }
        if !(self.t_end.is_finite() && self.t_end >= 0.0) {
            return Err(invalid(
                "t_end",
                format!("horizon must be nonnegative, got {}", self.t_end),
            ));
        }
        let steps = self.t_end / self.dt;
        if (steps - steps.round()).abs() > 1e-6 * steps.max(1.0) {
            return Err(invalid(
                "t_end",
                format!(
                    "horizon {} is not a whole number of steps of {}",
                    self.t_end, self.dt
                ),
            ));
        }
        if self.record_every == 0 {
            return Err(invalid("record_every", "must be at least 1"));
        }
        if !(self.blowup_guard > 0.0) {
            return Err(invalid("blowup_guard", "must be positive"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    pub fn with_horizon(&self, t_end: f64) -> Result<SimParams> {
        let p = SimParams {
            t_end,
            ..self.clone()
        };
        p.validate()?;
        Ok(p)
    }

    /// `a₀ = min(a, 1)`.
    pub fn a0(&self) -> f64 {
        self.a.min(1.0)
    }
}

/// Exact linear flow `e^{-(a+ξ⁴)t}` applied to coefficients.
pub fn linear_flow_hat(grid: &Grid, a: f64, coeffs: &[Complex], t: f64) -> Vec<Complex> {
    coeffs
        .iter()
        .zip(grid.wavenumbers())
        .map(|(&c, &xi)| c * (-(a + xi.powi(4)) * t).exp())
        .collect()
}

/// Precomputed symbols and scratch space for stepping one or more fields on
/// a shared grid.
pub struct Integrator {
    grid: Arc<Grid>,
    a: f64,
    dt: f64,
    decay: Vec<f64>,
    phi1: Vec<f64>,
    odd_deriv: Vec<f64>,
    mask: Vec<bool>,
    nonlinear: bool,
    forcing_hat: Vec<Complex>,
    noise_modes: Vec<Vec<(usize, Complex)>>,
    noise_scale: Vec<f64>,
    buf: Vec<Complex>,
}

impl Integrator {
    pub fn new(params: &SimParams, noise: &NoiseModel) -> Result<Integrator> {
        params.validate()?;
        let grid = Arc::clone(&params.grid);
        if !grid.same_as(noise.grid()) {
            return Err(LabError::GridMismatch);
        }
        let n = grid.n_points();
        let (decay, phi1) = exponential_symbols(&grid, params.a, params.dt);
        let odd_deriv = (0..n)
            .map(|j| {
                if j == n / 2 {
                    0.0
                } else {
                    grid.wavenumbers()[j]
                }
            })
            .collect();
        let cutoff = grid.dealias_cutoff() as i64;
        let mask = (0..n)
            .map(|j| !params.dealias || grid.signed_index(j).abs() <= cutoff)
            .collect();
        let sqrt_dt = params.dt.sqrt();
        Ok(Integrator {
            a: params.a,
            dt: params.dt,
            decay,
            phi1,
            odd_deriv,
            mask,
            nonlinear: params.nonlinear,
            forcing_hat: noise.forcing().coefficients().to_vec(),
            noise_modes: (0..noise.active_modes())
                .map(|i| basis_coefficients(&grid, i))
                .collect(),
            noise_scale: noise.coefficients().iter().map(|b| b * sqrt_dt).collect(),
            buf: vec![Complex::new(0.0, 0.0); n],
            grid,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn noise_modes(&self) -> usize {
        self.noise_scale.len()
    }

    /// Per-mode increments `b_i (β_i(t+dt) - β_i(t))`.
    pub fn draw_increments(&self, rng: &mut impl Rng, out: &mut [f64]) {
        for (o, s) in out.iter_mut().zip(&self.noise_scale) {
            let z: f64 = rng.sample(StandardNormal);
            *o = s * z;
        }
    }

    /// Coefficients of `ΔW = Σ_i incr_i e_i`.
    pub fn noise_hat(&self, increments: &[f64], out: &mut [Complex]) {
        out.fill(Complex::new(0.0, 0.0));
        for (modes, &x) in self.noise_modes.iter().zip(increments) {
            for &(j, c) in modes {
                out[j] += c * x;
            }
        }
    }

    /// `N̂(u)` for `N(u) = uu_x = ½(u²)_x`.
    pub fn nonlinear_hat(&mut self, u_hat: &[Complex], out: &mut [Complex]) {
        let zero = Complex::new(0.0, 0.0);
        if !self.nonlinear {
            out.fill(zero);
            return;
        }
        for ((b, &c), &keep) in self.buf.iter_mut().zip(u_hat).zip(&self.mask) {
            *b = if keep { c } else { zero };
        }
        self.grid.inverse_in_place(&mut self.buf);
        for b in self.buf.iter_mut() {
            *b = Complex::new(b.re * b.re, 0.0);
        }
        self.grid.forward_in_place(&mut self.buf);
        for (j, o) in out.iter_mut().enumerate() {
            *o = if self.mask[j] {
                Complex::new(0.0, 0.5 * self.odd_deriv[j]) * self.buf[j]
            } else {
                zero
            };
        }
    }

    /// Nonlinearity of the auxiliary process: `Q_N N(v) + P_N N(u)`.
    pub fn auxiliary_nonlinear_hat(
        &mut self,
        u_nl: &[Complex],
        v_hat: &[Complex],
        proj: &SpectralProjector,
        out: &mut [Complex],
    ) {
        let mut v_nl = vec![Complex::new(0.0, 0.0); v_hat.len()];
        self.nonlinear_hat(v_hat, &mut v_nl);
        auxiliary_from_parts(&self.grid, u_nl, &v_nl, proj, out);
    }

    /// One exponential-Euler step given `N̂` and `ΔŴ`.
    pub fn advance(&self, u_hat: &mut [Complex], nl_hat: &[Complex], dw_hat: &[Complex]) {
        for j in 0..u_hat.len() {
            u_hat[j] = u_hat[j] * self.decay[j]
                + (self.forcing_hat[j] - nl_hat[j]) * self.phi1[j]
                + dw_hat[j];
        }
    }
}

/// `Q_N v_nl + P_N u_nl`.
pub(crate) fn auxiliary_from_parts(
    grid: &Grid,
    u_nl: &[Complex],
    v_nl: &[Complex],
    proj: &SpectralProjector,
    out: &mut [Complex],
) {
    out.copy_from_slice(v_nl);
    proj.apply_coeffs(grid, out, ProjectionSide::Q);
    let mut pu = u_nl.to_vec();
    proj.apply_coeffs(grid, &mut pu, ProjectionSide::P);
    for (o, p) in out.iter_mut().zip(&pu) {
        *o += p;
    }
}

fn exponential_symbols(grid: &Grid, a: f64, dt: f64) -> (Vec<f64>, Vec<f64>) {
    grid.wavenumbers()
        .iter()
        .map(|&xi| {
            let lam = a + xi.powi(4);
            let decay = (-lam * dt).exp();
            (decay, -(-lam * dt).exp_m1() / lam)
        })
        .unzip()
}

fn check_finite(coeffs: &[Complex], time: f64) -> Result<()> {
    if coeffs.iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
        Ok(())
    } else {
        Err(LabError::NonFinite { time })
    }
}

/// Single step `u ↦ u(dt)` with an explicit increment `ΔW` and forcing `h`.
pub fn step(
    u: &Field,
    params: &SimParams,
    noise_increment: &Field,
    forcing: &Field,
) -> Result<Field> {
    u.same_grid(noise_increment)?;
    u.same_grid(forcing)?;
    if !u.grid().same_as(&params.grid) {
        return Err(LabError::GridMismatch);
    }
    let noise = NoiseModel::new(Vec::new(), forcing.clone(), 0)?;
    let mut integ = Integrator::new(params, &noise)?;
    let mut u_hat = u.coefficients().to_vec();
    let mut nl = vec![Complex::new(0.0, 0.0); u_hat.len()];
    integ.nonlinear_hat(&u_hat, &mut nl);
    integ.advance(&mut u_hat, &nl, noise_increment.coefficients());
    check_finite(&u_hat, params.dt)?;
    Field::from_spectral(u.grid(), u_hat)
}

/// Per-step norms, one entry per time level `k·dt`, `k = 0..=steps`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    pub t: Vec<f64>,
    /// `‖u‖`
    pub l2: Vec<f64>,
    /// `‖u‖₁`
    pub h1: Vec<f64>,
    /// `‖u‖₂`
    pub h2: Vec<f64>,
    /// `‖u_xx‖`
    pub uxx: Vec<f64>,
    /// `‖φu‖`
    pub phi_l2: Vec<f64>,
    /// `‖ψu‖`, `‖ψu‖₁`, `‖ψu‖₂`, `‖ψu_xx‖` (zero when weighted diagnostics are off)
    pub psi_l2: Vec<f64>,
    pub psi_h1: Vec<f64>,
    pub psi_h2: Vec<f64>,
    pub psi_uxx: Vec<f64>,
    /// `(h, u)`
    pub h_inner: Vec<f64>,
    /// Cumulative Itô sum `Σ 2(u_k, ΔW_k)`.
    pub martingale: Vec<f64>,
}

impl Diagnostics {
    fn truncate(&mut self, len: usize) {
        for v in [
            &mut self.t,
            &mut self.l2,
            &mut self.h1,
            &mut self.h2,
            &mut self.uxx,
            &mut self.phi_l2,
            &mut self.psi_l2,
            &mut self.psi_h1,
            &mut self.psi_h2,
            &mut self.psi_uxx,
            &mut self.h_inner,
            &mut self.martingale,
        ] {
            v.truncate(len);
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Cumulative trapezoid rule on a uniform grid; output starts at 0.
pub fn cumulative_trapezoid(values: &[f64], dt: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (k, v) in values.iter().enumerate() {
        if k > 0 {
            acc += 0.5 * dt * (values[k - 1] + v);
        }
        out.push(acc);
    }
    out
}

/// Running integrals of the squared diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Quadratures {
    /// `∫‖u‖²`
    pub l2_sq: Vec<f64>,
    /// `∫‖u‖₂²`
    pub h2_sq: Vec<f64>,
    /// `∫‖u_xx‖²`
    pub uxx_sq: Vec<f64>,
    /// `∫‖ψu‖²`
    pub psi_l2_sq: Vec<f64>,
    /// `∫‖ψu‖₂²`
    pub psi_h2_sq: Vec<f64>,
    /// `∫‖ψu_xx‖²`
    pub psi_uxx_sq: Vec<f64>,
    /// `∫(h, u)`
    pub h_inner: Vec<f64>,
}

impl Quadratures {
    fn from_diagnostics(d: &Diagnostics, dt: f64) -> Quadratures {
        let sq = |v: &[f64]| cumulative_trapezoid(&v.iter().map(|x| x * x).collect::<Vec<_>>(), dt);
        Quadratures {
            l2_sq: sq(&d.l2),
            h2_sq: sq(&d.h2),
            uxx_sq: sq(&d.uxx),
            psi_l2_sq: sq(&d.psi_l2),
            psi_h2_sq: sq(&d.psi_h2),
            psi_uxx_sq: sq(&d.psi_uxx),
            h_inner: cumulative_trapezoid(&d.h_inner, dt),
        }
    }
}

/// Per-step forcing increments, row-major `steps × modes`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseLog {
    pub modes: usize,
    pub increments: Vec<f64>,
}

impl NoiseLog {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.increments[k * self.modes..(k + 1) * self.modes]
    }

    pub fn steps(&self) -> usize {
        self.increments.len().checked_div(self.modes).unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: Arc<Grid>,
    pub a: f64,
    pub dt: f64,
    pub seed: u64,
    pub steps: usize,
    pub record_every: usize,
    /// Times of the recorded states.
    pub times: Vec<f64>,
    pub states: Vec<Field>,
    pub diagnostics: Diagnostics,
    pub quadratures: Quadratures,
    pub noise_log: Option<NoiseLog>,
    pub weighted: bool,
}

impl Trajectory {
    pub fn initial_state(&self) -> &Field {
        &self.states[0]
    }

    pub fn final_state(&self) -> &Field {
        self.states
            .last()
            .expect("trajectory has at least one state")
    }

    pub fn t_end(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    /// Step index of `t`, if `t` lies on the step grid.
    pub fn step_index(&self, t: f64) -> Option<usize> {
        let k = (t / self.dt).round();
        if k < 0.0 || k > self.steps as f64 || (k * self.dt - t).abs() > 1e-9 * self.dt.max(t.abs())
        {
            None
        } else {
            Some(k as usize)
        }
    }

    /// Recorded state at time `t`, if one was kept.
    pub fn state_at(&self, t: f64) -> Option<&Field> {
        let k = self.step_index(t)?;
        self.state_at_step(k)
    }

    pub fn state_at_step(&self, k: usize) -> Option<&Field> {
        if k.is_multiple_of(self.record_every) {
            self.states.get(k / self.record_every)
        } else if k == self.steps {
            self.states.last()
        } else {
            None
        }
    }

    /// `∫₀^t ‖u‖^{2p}` on the step grid.
    pub fn moment_integral(&self, p: f64) -> Vec<f64> {
        let vals: Vec<f64> = self
            .diagnostics
            .l2
            .iter()
            .map(|x| x.powf(2.0 * p))
            .collect();
        cumulative_trapezoid(&vals, self.dt)
    }
}

/// Builds a [`Trajectory`] from a stream of spectral states.
pub(crate) struct Recorder {
    grid: Arc<Grid>,
    a: f64,
    dt: f64,
    seed: u64,
    steps: usize,
    record_every: usize,
    guard: f64,
    weighted: bool,
    weights: WeightProfile,
    h_hat: Vec<Complex>,
    times: Vec<f64>,
    states: Vec<Field>,
    diag: Diagnostics,
    noise_log: Option<NoiseLog>,
    martingale_acc: f64,
    psi: Vec<f64>,
    buf: Vec<Complex>,
}

impl Recorder {
    pub(crate) fn new(params: &SimParams, noise: &NoiseModel) -> Recorder {
        let n = params.grid.n_points();
        Recorder {
            grid: Arc::clone(&params.grid),
            a: params.a,
            dt: params.dt,
            seed: noise.seed(),
            steps: params.steps(),
            record_every: params.record_every,
            guard: params.blowup_guard,
            weighted: params.weighted_diagnostics,
            weights: WeightProfile::new(&params.grid),
            h_hat: noise.forcing().coefficients().to_vec(),
            times: Vec::new(),
            states: Vec::new(),
            diag: Diagnostics::default(),
            noise_log: params.record_noise.then(|| NoiseLog {
                modes: noise.active_modes(),
                increments: Vec::with_capacity(noise.active_modes() * params.steps()),
            }),
            martingale_acc: 0.0,
            psi: vec![0.0; n],
            buf: vec![Complex::new(0.0, 0.0); n],
        }
    }

    /// Continue from the first `k + 1` time levels of `traj`.
    fn from_prefix(traj: &Trajectory, k: usize, h_hat: Vec<Complex>) -> Recorder {
        let n = traj.grid.n_points();
        let mut diag = traj.diagnostics.clone();
        diag.truncate(k + 1);
        let kept = k / traj.record_every + 1;
        Recorder {
            grid: Arc::clone(&traj.grid),
            a: traj.a,
            dt: traj.dt,
            seed: traj.seed,
            steps: traj.steps,
            record_every: traj.record_every,
            guard: f64::INFINITY,
            weighted: traj.weighted,
            weights: WeightProfile::new(&traj.grid),
            h_hat,
            times: traj.times[..kept].to_vec(),
            states: traj.states[..kept].to_vec(),
            diag,
            noise_log: traj.noise_log.as_ref().map(|log| NoiseLog {
                modes: log.modes,
                increments: log.increments[..k * log.modes].to_vec(),
            }),
            martingale_acc: traj.diagnostics.martingale[k],
            psi: vec![0.0; n],
            buf: vec![Complex::new(0.0, 0.0); n],
        }
    }

    /// Log the increment of step `k → k+1` and its Itô martingale term,
    /// evaluated at the state `u_k`.
    pub(crate) fn log_noise(&mut self, increments: &[f64], u_hat: &[Complex]) {
        let dm: f64 = increments
            .iter()
            .enumerate()
            .map(|(i, x)| 2.0 * x * real_coefficient(&self.grid, u_hat, i))
            .sum();
        self.martingale_acc += dm;
        if let Some(log) = self.noise_log.as_mut() {
            log.increments.extend_from_slice(increments);
        }
    }

    pub(crate) fn record(&mut self, k: usize, u_hat: &[Complex]) -> Result<()> {
        let t = k as f64 * self.dt;
        check_finite(u_hat, t)?;
        let two_l = 2.0 * self.grid.half_length();
        let (mut l2, mut h1, mut h2, mut uxx, mut hin) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for ((c, &xi), hc) in u_hat.iter().zip(self.grid.wavenumbers()).zip(&self.h_hat) {
            let m = c.norm_sqr();
            let x2 = xi * xi;
            l2 += m;
            h1 += (1.0 + x2) * m;
            h2 += (1.0 + x2) * (1.0 + x2) * m;
            uxx += x2 * x2 * m;
            hin += (hc.conj() * c).re;
        }
        let h1 = (two_l * h1).sqrt();
        if h1 > self.guard {
            return Err(LabError::BlowUp {
                time: t,
                norm: h1,
                guard: self.guard,
            });
        }
        let d = &mut self.diag;
        d.t.push(t);
        d.l2.push((two_l * l2).sqrt());
        d.h1.push(h1);
        d.h2.push((two_l * h2).sqrt());
        d.uxx.push((two_l * uxx).sqrt());
        d.h_inner.push(two_l * hin);
        d.martingale.push(self.martingale_acc);

        let dx = self.grid.dx();
        self.buf.copy_from_slice(u_hat);
        self.grid.inverse_in_place(&mut self.buf);
        let samples: Vec<f64> = self.buf.iter().map(|c| c.re).collect();
        let phi_sq: f64 = samples
            .iter()
            .zip(self.weights.phi_values())
            .map(|(u, p)| (u * p) * (u * p))
            .sum();
        d.phi_l2.push((dx * phi_sq).sqrt());

        if self.weighted {
            self.weights.psi_into(t, &mut self.psi);
            for (b, (u, p)) in self.buf.iter_mut().zip(samples.iter().zip(&self.psi)) {
                *b = Complex::new(u * p, 0.0);
            }
            let psi_l2: f64 = self.buf.iter().map(|b| b.re * b.re).sum::<f64>() * dx;
            self.grid.forward_in_place(&mut self.buf);
            let (mut s1, mut s2) = (0.0, 0.0);
            for (c, &xi) in self.buf.iter().zip(self.grid.wavenumbers()) {
                let w = 1.0 + xi * xi;
                s1 += w * c.norm_sqr();
                s2 += w * w * c.norm_sqr();
            }
            d.psi_l2.push(psi_l2.sqrt());
            d.psi_h1.push((two_l * s1).sqrt());
            d.psi_h2.push((two_l * s2).sqrt());
            for ((b, c), &xi) in self.buf.iter_mut().zip(u_hat).zip(self.grid.wavenumbers()) {
                *b = c * (-xi * xi);
            }
            self.grid.inverse_in_place(&mut self.buf);
            let s: f64 = self
                .buf
                .iter()
                .zip(&self.psi)
                .map(|(b, p)| (b.re * p) * (b.re * p))
                .sum();
            d.psi_uxx.push((dx * s).sqrt());
        } else {
            d.psi_l2.push(0.0);
            d.psi_h1.push(0.0);
            d.psi_h2.push(0.0);
            d.psi_uxx.push(0.0);
        }

        if k.is_multiple_of(self.record_every) || k == self.steps {
            self.times.push(t);
            self.states
                .push(Field::from_spectral(&self.grid, u_hat.to_vec())?);
        }
        Ok(())
    }

    pub(crate) fn diagnostics(&self) -> &Diagnostics {
        &self.diag
    }

    pub(crate) fn finish(self) -> Trajectory {
        let quadratures = Quadratures::from_diagnostics(&self.diag, self.dt);
        Trajectory {
            grid: self.grid,
            a: self.a,
            dt: self.dt,
            seed: self.seed,
            steps: self.steps,
            record_every: self.record_every,
            times: self.times,
            states: self.states,
            diagnostics: self.diag,
            quadratures,
            noise_log: self.noise_log,
            weighted: self.weighted,
        }
    }
}

/// Integrate (KSE) from `u0` over `[0, t_end]`.
pub fn simulate(u0: &Field, noise: &NoiseModel, params: &SimParams) -> Result<Trajectory> {
    if !u0.grid().same_as(&params.grid) {
        return Err(LabError::GridMismatch);
    }
    let mut integ = Integrator::new(params, noise)?;
    let mut rec = Recorder::new(params, noise);
    let mut rng = noise.rng();
    let n = params.grid.n_points();
    let mut u_hat = u0.coefficients().to_vec();
    let mut nl = vec![Complex::new(0.0, 0.0); n];
    let mut dw = vec![Complex::new(0.0, 0.0); n];
    let mut incr = vec![0.0; integ.noise_modes()];
    rec.record(0, &u_hat)?;
    for k in 0..params.steps() {
        integ.draw_increments(&mut rng, &mut incr);
        rec.log_noise(&incr, &u_hat);
        integ.nonlinear_hat(&u_hat, &mut nl);
        integ.noise_hat(&incr, &mut dw);
        integ.advance(&mut u_hat, &nl, &dw);
        rec.record(k + 1, &u_hat)?;
    }
    Ok(rec.finish())
}

/// Discrete check of `‖z(t+T)‖² + a₀∫_T^{t+T}‖z‖₂² ≤ ‖z(T)‖²` along the
/// exact linear flow, over all pairs of recorded times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayCertificate {
    pub min_slack: f64,
    pub pairs: usize,
    pub holds: bool,
}

/// Exact solution of `z_t + az + z_xxxx = 0`.
pub fn simulate_linear(z0: &Field, params: &SimParams) -> Result<(Trajectory, DecayCertificate)> {
    if !z0.grid().same_as(&params.grid) {
        return Err(LabError::GridMismatch);
    }
    params.validate()?;
    let grid = &params.grid;
    let noise = NoiseModel::unforced(grid);
    let mut rec = Recorder::new(params, &noise);
    let z_hat = z0.coefficients().to_vec();
    for k in 0..=params.steps() {
        let state = linear_flow_hat(grid, params.a, &z_hat, k as f64 * params.dt);
        rec.record(k, &state)?;
    }
    let traj = rec.finish();
    let cert = linear_certificate(grid, params.a, &z_hat, &traj.times);
    Ok((traj, cert))
}

fn linear_certificate(grid: &Grid, a: f64, z_hat: &[Complex], times: &[f64]) -> DecayCertificate {
    let a0 = a.min(1.0);
    let two_l = 2.0 * grid.half_length();
    let lam: Vec<f64> = grid.wavenumbers().iter().map(|xi| a + xi.powi(4)).collect();
    let w2: Vec<f64> = grid
        .wavenumbers()
        .iter()
        .map(|xi| (1.0 + xi * xi).powi(2))
        .collect();
    let m0: Vec<f64> = z_hat.iter().map(|c| c.norm_sqr()).collect();
    let norm_sq = |t: f64| -> f64 {
        two_l
            * m0.iter()
                .zip(&lam)
                .map(|(m, l)| m * (-2.0 * l * t).exp())
                .sum::<f64>()
    };
    let scale = norm_sq(0.0).max(f64::MIN_POSITIVE);
    let mut min_slack = f64::INFINITY;
    let mut pairs = 0;
    for (i, &t0) in times.iter().enumerate() {
        for &t1 in &times[i..] {
            let integral: f64 = two_l
                * m0.iter()
                    .zip(&lam)
                    .zip(&w2)
                    .map(|((m, l), w)| {
                        m * w * ((-2.0 * l * t0).exp() - (-2.0 * l * t1).exp()) / (2.0 * l)
                    })
                    .sum::<f64>();
            let slack = norm_sq(t0) - norm_sq(t1) - a0 * integral;
            min_slack = min_slack.min(slack);
            pairs += 1;
        }
    }
    DecayCertificate {
        min_slack,
        pairs,
        holds: min_slack >= -1e-12 * scale,
    }
}

/// The auxiliary process `v` driven by the noise recorded in `u_traj`:
/// `v_t + av + v_xxxx + vv_x + P_N(uu_x - vv_x) = h + η`, `v(0) = u0′`.
pub fn simulate_auxiliary(
    u_traj: &Trajectory,
    u0_prime: &Field,
    n_modes: usize,
    noise: &NoiseModel,
    params: &SimParams,
) -> Result<Trajectory> {
    if !u0_prime.grid().same_as(&u_traj.grid) || !params.grid.same_as(&u_traj.grid) {
        return Err(LabError::GridMismatch);
    }
    if noise.seed() != u_traj.seed {
        return Err(LabError::NoiseMismatch(format!(
            "trajectory seed {} differs from noise seed {}",
            u_traj.seed,
            noise.seed()
        )));
    }
    if params.steps() != u_traj.steps || params.dt != u_traj.dt || params.a != u_traj.a {
        return Err(LabError::NoiseMismatch(
            "time grid or damping differs".into(),
        ));
    }
    if n_modes > params.grid.n_points() {
        return Err(invalid("N", "projector size exceeds mode count"));
    }
    let log = match &u_traj.noise_log {
        Some(log) if log.modes == noise.active_modes() && log.steps() == u_traj.steps => log,
        Some(_) => return Err(LabError::NoiseMismatch("noise log shape differs".into())),
        None if noise.is_noiseless() => &NoiseLog {
            modes: 0,
            increments: Vec::new(),
        },
        None => {
            return Err(LabError::NoiseMismatch(
                "trajectory has no noise log".into(),
            ))
        }
    };
    let proj = SpectralProjector::new(n_modes);
    let mut integ = Integrator::new(params, noise)?;
    let mut rec = Recorder::new(params, noise);
    let n = params.grid.n_points();
    let zero = Complex::new(0.0, 0.0);
    let mut u_hat = u_traj.initial_state().coefficients().to_vec();
    let mut v_hat = u0_prime.coefficients().to_vec();
    let (mut nl_u, mut nl_v, mut dw) = (vec![zero; n], vec![zero; n], vec![zero; n]);
    let empty: [f64; 0] = [];
    rec.record(0, &v_hat)?;
    for k in 0..params.steps() {
        let incr = if log.modes == 0 {
            &empty[..]
        } else {
            log.row(k)
        };
        rec.log_noise(incr, &v_hat);
        integ.nonlinear_hat(&u_hat, &mut nl_u);
        integ.auxiliary_nonlinear_hat(&nl_u, &v_hat, &proj, &mut nl_v);
        integ.noise_hat(incr, &mut dw);
        integ.advance(&mut u_hat, &nl_u, &dw);
        integ.advance(&mut v_hat, &nl_v, &dw);
        rec.record(k + 1, &v_hat)?;
    }
    let replayed = Field::from_spectral(&params.grid, u_hat)?;
    if replayed.samples() != u_traj.final_state().samples() {
        return Err(LabError::NoiseMismatch(
            "replaying the noise log does not reproduce the driving trajectory".into(),
        ));
    }
    Ok(rec.finish())
}

/// `traj` up to `tau`, then the exact linear flow from `traj(tau)`.
/// `tau = +∞` returns the input unchanged; finite `tau` must be a recorded time.
pub fn make_truncated(traj: &Trajectory, tau: f64) -> Result<Trajectory> {
    if tau == f64::INFINITY || tau > traj.t_end() {
        return Ok(traj.clone());
    }
    let k_tau = traj
        .step_index(tau)
        .filter(|k| k % traj.record_every == 0 || *k == traj.steps)
        .ok_or_else(|| invalid("tau", format!("{tau} is not a recorded time")))?;
    let state = traj
        .state_at_step(k_tau)
        .expect("recorded step")
        .coefficients()
        .to_vec();
    let h_hat = vec![Complex::new(0.0, 0.0); traj.grid.n_points()];
    let mut rec = Recorder::from_prefix(traj, k_tau, h_hat);
    let zeros = vec![0.0; rec.noise_log.as_ref().map_or(0, |l| l.modes)];
    for k in k_tau + 1..=traj.steps {
        let u_hat = linear_flow_hat(&traj.grid, traj.a, &state, (k - k_tau) as f64 * traj.dt);
        rec.log_noise(&zeros, &u_hat);
        rec.record(k, &u_hat)?;
    }
    Ok(rec.finish())
}
