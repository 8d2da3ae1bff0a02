//! Spectral discretization of a large periodic box `[-L, L)`.
//!
//! Coefficients follow the normalization `c_k = n^{-1} Σ_j f(x_j) e^{-2πi jk/n}`
//! with `x_j = -L + j dx`, stored in FFT order. With that convention the grid
//! L² norm is `‖f‖² = dx Σ_j f_j² = 2L Σ_k |c_k|²`, which is the quadrature
//! weight used by every Sobolev norm below.

use std::fmt;
use std::sync::{Arc, OnceLock};

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{invalid, LabError, Result};
use crate::rng::{stream, StreamTag};

pub type Complex = Complex64;

/// Uniform grid on `[-L, L)` with periodic wraparound.
pub struct Grid {
    half_length: f64,
    n: usize,
    dx: f64,
    wavenumbers: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("half_length", &self.half_length)
            .field("n", &self.n)
            .finish()
    }
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.half_length.to_bits() == other.half_length.to_bits() && self.n == other.n
    }
}

/// Build the grid for `[-L, L)` with `n` points.
pub fn make_grid(half_length: f64, n: usize) -> Result<Arc<Grid>> {
    Grid::new(half_length, n)
}

impl Grid {
    pub fn new(half_length: f64, n: usize) -> Result<Arc<Grid>> {
        if !(half_length.is_finite() && half_length > 0.0) {
            return Err(LabError::InvalidGrid(format!(
                "half length must be positive, got {half_length}"
            )));
        }
        if n < 8 || !n.is_multiple_of(2) {
            return Err(LabError::InvalidGrid(format!(
                "point count must be even and at least 8, got {n}"
            )));
        }
        let dx = 2.0 * half_length / n as f64;
        let wavenumbers = (0..n)
            .map(|j| std::f64::consts::PI * signed_index(j, n) as f64 / half_length)
            .collect();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        Ok(Arc::new(Grid {
            half_length,
            n,
            dx,
            wavenumbers,
            fwd,
            inv,
        }))
    }

    pub fn half_length(&self) -> f64 {
        self.half_length
    }

    pub fn n_points(&self) -> usize {
        self.n
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn x(&self, j: usize) -> f64 {
        -self.half_length + j as f64 * self.dx
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.x(j)).collect()
    }

    /// Wavenumbers `πk/L` in FFT storage order.
    pub fn wavenumbers(&self) -> &[f64] {
        &self.wavenumbers
    }

    /// Wavenumbers sorted from `-n/2` to `n/2 - 1`.
    pub fn sorted_wavenumbers(&self) -> Vec<f64> {
        let mut w = self.wavenumbers.clone();
        w.sort_by(|a, b| a.total_cmp(b));
        w
    }

    pub fn max_wavenumber(&self) -> f64 {
        std::f64::consts::PI * (self.n / 2) as f64 / self.half_length
    }

    /// Largest `|k|` kept by the 2/3 rule.
    pub fn dealias_cutoff(&self) -> usize {
        (self.n - 1) / 3
    }

    pub(crate) fn signed_index(&self, j: usize) -> i64 {
        signed_index(j, self.n)
    }

    pub(crate) fn forward_in_place(&self, buf: &mut [Complex]) {
        self.fwd.process(buf);
        let scale = 1.0 / self.n as f64;
        for c in buf.iter_mut() {
            *c *= scale;
        }
    }

    /// Coefficients of real samples.
    pub fn forward(&self, samples: &[f64]) -> Vec<Complex> {
        let mut buf: Vec<Complex> = samples.iter().map(|&x| Complex::new(x, 0.0)).collect();
        self.forward_in_place(&mut buf);
        buf
    }

    pub(crate) fn inverse_in_place(&self, buf: &mut [Complex]) {
        self.inv.process(buf);
    }

    /// Real part of the inverse transform.
    pub fn inverse(&self, coeffs: &[Complex]) -> Vec<f64> {
        let mut buf = coeffs.to_vec();
        self.inverse_in_place(&mut buf);
        buf.iter().map(|c| c.re).collect()
    }

    pub fn same_as(&self, other: &Grid) -> bool {
        self == other
    }
}

fn signed_index(j: usize, n: usize) -> i64 {
    if j < n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

/// A real field carried as grid samples, with spectral coefficients computed
/// on first use.
#[derive(Clone)]
pub struct Field {
    grid: Arc<Grid>,
    samples: Vec<f64>,
    coeffs: OnceLock<Vec<Complex>>,
}

impl fmt::Debug for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Field")
            .field("grid", &self.grid)
            .field("l2", &self.l2_norm())
            .finish()
    }
}

impl PartialEq for Field {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid && self.samples == other.samples
    }
}

impl Field {
    pub fn from_samples(grid: &Arc<Grid>, samples: Vec<f64>) -> Result<Field> {
        if samples.len() != grid.n_points() {
            return Err(LabError::InvalidGrid(format!(
                "expected {} samples, got {}",
                grid.n_points(),
                samples.len()
            )));
        }
        if let Some(j) = samples.iter().position(|v| !v.is_finite()) {
            return Err(invalid("samples", format!("non-finite value at index {j}")));
        }
        Ok(Field {
            grid: Arc::clone(grid),
            samples,
            coeffs: OnceLock::new(),
        })
    }

    pub fn zeros(grid: &Arc<Grid>) -> Field {
        Field {
            grid: Arc::clone(grid),
            samples: vec![0.0; grid.n_points()],
            coeffs: OnceLock::new(),
        }
    }

    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn(f64) -> f64) -> Result<Field> {
        let samples = (0..grid.n_points()).map(|j| f(grid.x(j))).collect();
        Field::from_samples(grid, samples)
    }

    /// Field from coefficients; any imaginary residue of the inverse transform
    /// is discarded.
    pub fn from_coefficients(grid: &Arc<Grid>, coeffs: Vec<Complex>) -> Result<Field> {
        if coeffs.len() != grid.n_points() {
            return Err(LabError::InvalidGrid("coefficient count mismatch".into()));
        }
        let samples = grid.inverse(&coeffs);
        let field = Field::from_samples(grid, samples)?;
        Ok(field)
    }

    /// Field whose cached coefficients are exactly `coeffs`.
    pub(crate) fn from_spectral(grid: &Arc<Grid>, coeffs: Vec<Complex>) -> Result<Field> {
        let samples = grid.inverse(&coeffs);
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(invalid("coefficients", "non-finite field"));
        }
        Ok(Field {
            grid: Arc::clone(grid),
            samples,
            coeffs: OnceLock::from(coeffs),
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn coefficients(&self) -> &[Complex] {
        self.coeffs.get_or_init(|| self.grid.forward(&self.samples))
    }

    pub fn same_grid(&self, other: &Field) -> Result<()> {
        if self.grid.same_as(&other.grid) {
            Ok(())
        } else {
            Err(LabError::GridMismatch)
        }
    }

    /// Grid L² norm `(dx Σ f_j²)^{1/2}`.
    pub fn l2_norm(&self) -> f64 {
        (self.grid.dx() * self.samples.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }

    pub fn inner(&self, other: &Field) -> f64 {
        self.grid.dx()
            * self
                .samples
                .iter()
                .zip(&other.samples)
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }

    pub fn sobolev_norm(&self, s: f64) -> f64 {
        sobolev_norm(self, s)
    }

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Field> {
        Field::from_samples(&self.grid, self.samples.iter().map(|&v| f(v)).collect())
    }

    fn zip_with(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field> {
        self.same_grid(other)?;
        Field::from_samples(
            &self.grid,
            self.samples
                .iter()
                .zip(&other.samples)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add(&self, other: &Field) -> Result<Field> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Pointwise product.
    pub fn mul(&self, other: &Field) -> Result<Field> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Field {
        Field {
            grid: Arc::clone(&self.grid),
            samples: self.samples.iter().map(|v| v * factor).collect(),
            coeffs: OnceLock::new(),
        }
    }

    /// Spectral derivative of the given order. The Nyquist mode is dropped for
    /// odd orders so the result stays real.
    pub fn derivative(&self, order: u32) -> Field {
        let coeffs = derivative_coefficients(&self.grid, self.coefficients(), order);
        let samples = self.grid.inverse(&coeffs);
        Field {
            grid: Arc::clone(&self.grid),
            samples,
            coeffs: OnceLock::from(coeffs),
        }
    }
}

pub(crate) fn derivative_coefficients(grid: &Grid, coeffs: &[Complex], order: u32) -> Vec<Complex> {
    let n = grid.n_points();
    coeffs
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            if order % 2 == 1 && j == n / 2 {
                return Complex::new(0.0, 0.0);
            }
            let ik = Complex::new(0.0, grid.wavenumbers()[j]);
            c * ik.powu(order)
        })
        .collect()
}

/// Discrete `H^s` norm `(2L Σ_k (1+ξ_k²)^s |c_k|²)^{1/2}`.
pub fn sobolev_norm(f: &Field, s: f64) -> f64 {
    let grid = f.grid();
    sobolev_norm_coeffs(grid, f.coefficients(), s)
}

pub(crate) fn sobolev_norm_coeffs(grid: &Grid, coeffs: &[Complex], s: f64) -> f64 {
    let sum: f64 = coeffs
        .iter()
        .zip(grid.wavenumbers())
        .map(|(c, &xi)| (1.0 + xi * xi).powf(s) * c.norm_sqr())
        .sum();
    (2.0 * grid.half_length() * sum).sqrt()
}

/// The logarithmic weight `φ(x) = ln(x² + 2)` and the space-time weight
/// `ψ(t, x) = φ(x)(1 - e^{-t/φ(x)})` sampled on a grid.
#[derive(Debug, Clone)]
pub struct WeightProfile {
    grid: Arc<Grid>,
    phi: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    Phi,
    Psi,
}

pub fn phi(x: f64) -> f64 {
    (x * x + 2.0).ln()
}

pub fn psi(t: f64, x: f64) -> f64 {
    let p = phi(x);
    p * -(-t / p).exp_m1()
}

impl WeightProfile {
    pub fn new(grid: &Arc<Grid>) -> WeightProfile {
        WeightProfile {
            grid: Arc::clone(grid),
            phi: grid.xs().into_iter().map(phi).collect(),
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn phi_values(&self) -> &[f64] {
        &self.phi
    }

    pub fn phi_max(&self) -> f64 {
        self.phi.iter().cloned().fold(f64::MIN, f64::max)
    }

    /// `ψ(t, ·)` on the grid; identically zero at `t = 0`.
    pub fn psi_values(&self, t: f64) -> Vec<f64> {
        self.phi.iter().map(|&p| p * -(-t / p).exp_m1()).collect()
    }

    pub(crate) fn psi_into(&self, t: f64, out: &mut [f64]) {
        for (o, &p) in out.iter_mut().zip(&self.phi) {
            *o = p * -(-t / p).exp_m1();
        }
    }
}

/// `‖weight · f‖` with weight `φ` or `ψ(t, ·)`.
pub fn weighted_norm(f: &Field, w: &WeightProfile, t: f64, mode: WeightMode) -> Result<f64> {
    if !f.grid().same_as(w.grid()) {
        return Err(LabError::GridMismatch);
    }
    let weights = match mode {
        WeightMode::Phi => w.phi.clone(),
        WeightMode::Psi => {
            if !(t >= 0.0) {
                return Err(invalid(
                    "t",
                    format!("weight time must be nonnegative, got {t}"),
                ));
            }
            w.psi_values(t)
        }
    };
    let sum: f64 = f
        .samples()
        .iter()
        .zip(&weights)
        .map(|(v, w)| (v * w) * (v * w))
        .sum();
    Ok((f.grid().dx() * sum).sqrt())
}

/// Elements of the real Fourier basis, centred at `x = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RealMode {
    Constant,
    Cos(usize),
    Sin(usize),
    Nyquist,
}

/// The `i`-th (0-based) real basis element: constant, then `cos`/`sin` pairs
/// by increasing frequency, Nyquist cosine last.
pub fn real_mode(i: usize, n: usize) -> RealMode {
    if i == 0 {
        RealMode::Constant
    } else if i == n - 1 {
        RealMode::Nyquist
    } else if i % 2 == 1 {
        RealMode::Cos(i.div_ceil(2))
    } else {
        RealMode::Sin(i / 2)
    }
}

/// FFT-order coefficients of the normalized basis function `e_{i+1}`.
pub fn basis_coefficients(grid: &Grid, i: usize) -> Vec<(usize, Complex)> {
    let n = grid.n_points();
    let l = grid.half_length();
    let sign = |m: usize| if m.is_multiple_of(2) { 1.0 } else { -1.0 };
    match real_mode(i, n) {
        RealMode::Constant => vec![(0, Complex::new(1.0 / (2.0 * l).sqrt(), 0.0))],
        RealMode::Cos(m) => {
            let c = sign(m) / (2.0 * l.sqrt());
            vec![(m, Complex::new(c, 0.0)), (n - m, Complex::new(c, 0.0))]
        }
        RealMode::Sin(m) => {
            let c = sign(m) / (2.0 * l.sqrt());
            vec![(m, Complex::new(0.0, -c)), (n - m, Complex::new(0.0, c))]
        }
        RealMode::Nyquist => vec![(n / 2, Complex::new(sign(n / 2) / (2.0 * l).sqrt(), 0.0))],
    }
}

pub fn basis_function(grid: &Arc<Grid>, i: usize) -> Result<Field> {
    if i >= grid.n_points() {
        return Err(invalid("i", "basis index out of range"));
    }
    let mut coeffs = vec![Complex::new(0.0, 0.0); grid.n_points()];
    for (j, c) in basis_coefficients(grid, i) {
        coeffs[j] = c;
    }
    Field::from_coefficients(grid, coeffs)
}

/// `(f, e_{i+1})` computed from the coefficients.
pub fn real_coefficient(grid: &Grid, coeffs: &[Complex], i: usize) -> f64 {
    let n = grid.n_points();
    let l = grid.half_length();
    let sign = |m: usize| if m.is_multiple_of(2) { 1.0 } else { -1.0 };
    match real_mode(i, n) {
        RealMode::Constant => (2.0 * l).sqrt() * coeffs[0].re,
        RealMode::Cos(m) => 2.0 * l.sqrt() * sign(m) * coeffs[m].re,
        RealMode::Sin(m) => -2.0 * l.sqrt() * sign(m) * coeffs[m].im,
        RealMode::Nyquist => (2.0 * l).sqrt() * sign(n / 2) * coeffs[n / 2].re,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionSide {
    P,
    Q,
}

/// Orthogonal projection onto the span of the first `n_modes` real basis
/// elements (`P`) or onto its complement (`Q`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpectralProjector {
    n_modes: usize,
}

impl SpectralProjector {
    pub fn new(n_modes: usize) -> SpectralProjector {
        SpectralProjector { n_modes }
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn is_identity(&self, grid: &Grid) -> bool {
        self.n_modes >= grid.n_points()
    }

    /// Project FFT-order coefficients in place.
    pub(crate) fn apply_coeffs(&self, grid: &Grid, coeffs: &mut [Complex], side: ProjectionSide) {
        let n = grid.n_points();
        let keep_p = side == ProjectionSide::P;
        let zero = Complex::new(0.0, 0.0);
        // Mode 0 and the Nyquist mode are single real elements.
        let const_kept = self.n_modes >= 1;
        if const_kept != keep_p {
            coeffs[0] = zero;
        }
        let nyq_kept = self.n_modes >= n;
        if nyq_kept != keep_p {
            coeffs[n / 2] = zero;
        }
        for m in 1..n / 2 {
            let cos_kept = self.n_modes > 2 * m - 1;
            let sin_kept = self.n_modes > 2 * m;
            let (keep_cos, keep_sin) = if keep_p {
                (cos_kept, sin_kept)
            } else {
                (!cos_kept, !sin_kept)
            };
            // Each slot keeps its own bits so that P + Q is exactly the identity.
            for j in [m, n - m] {
                let c = coeffs[j];
                coeffs[j] = Complex::new(
                    if keep_cos { c.re } else { 0.0 },
                    if keep_sin { c.im } else { 0.0 },
                );
            }
        }
    }

    pub fn apply(&self, f: &Field, side: ProjectionSide) -> Result<Field> {
        project(f, self, side)
    }
}

/// Constant in `‖f‖_∞ ≤ C‖f‖₁` on this grid: `(Σ_k (1+ξ_k²)^{-1} / 2L)^{1/2}`.
pub fn sup_norm_constant(grid: &Grid) -> f64 {
    let s: f64 = grid
        .wavenumbers()
        .iter()
        .map(|xi| 1.0 / (1.0 + xi * xi))
        .sum();
    (s / (2.0 * grid.half_length())).sqrt()
}

/// `P_N f` or `Q_N f`.
pub fn project(f: &Field, proj: &SpectralProjector, side: ProjectionSide) -> Result<Field> {
    let grid = f.grid();
    if proj.n_modes() > grid.n_points() {
        return Err(invalid(
            "N",
            format!(
                "projector size {} exceeds mode count {}",
                proj.n_modes(),
                grid.n_points()
            ),
        ));
    }
    let mut coeffs = f.coefficients().to_vec();
    proj.apply_coeffs(grid, &mut coeffs, side);
    Field::from_spectral(grid, coeffs)
}

/// C² cut-off: 1 on `[-A/2, A/2]`, 0 outside `[-A, A]`, monotone blend
/// `1 - (s - sin(2πs)/2π)` on the transition bands.
pub fn cutoff_value(a: f64, x: f64) -> f64 {
    let r = x.abs();
    if r <= 0.5 * a {
        1.0
    } else if r >= a {
        0.0
    } else {
        let s = (r - 0.5 * a) / (0.5 * a);
        let tau = std::f64::consts::TAU;
        1.0 - (s - (tau * s).sin() / tau)
    }
}

pub fn cutoff_chi(a: f64, grid: &Arc<Grid>) -> Result<Field> {
    if !(a > 0.0) || a > grid.half_length() {
        return Err(invalid(
            "A",
            format!("cut-off radius must lie in (0, L], got {a}"),
        ));
    }
    Field::from_fn(grid, |x| cutoff_value(a, x))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CutoffRow {
    pub n_modes: usize,
    pub sup_ratio: f64,
}

/// Seeded random test field band-limited to the first `band` real modes, with
/// coefficients decaying like `(1+ξ²)^{-(s+1)/2}`.
pub fn random_band_limited(grid: &Arc<Grid>, band: usize, s: f64, rng: &mut impl Rng) -> Field {
    let n = grid.n_points();
    let mut coeffs = vec![Complex::new(0.0, 0.0); n];
    for i in 0..band.min(n) {
        let z: f64 = rng.sample(StandardNormal);
        let m = match real_mode(i, n) {
            RealMode::Constant => 0,
            RealMode::Cos(m) | RealMode::Sin(m) => m,
            RealMode::Nyquist => n / 2,
        };
        let xi = grid.wavenumbers()[m];
        let amp = z * (1.0 + xi * xi).powf(-(s + 1.0) / 2.0);
        for (j, c) in basis_coefficients(grid, i) {
            coeffs[j] += c * amp;
        }
    }
    Field::from_coefficients(grid, coeffs).expect("finite by construction")
}

/// Seeded smooth, spatially localized field with `‖f‖₁ = h1_radius`: a random
/// combination of the first 32 real modes under a Gaussian envelope of width
/// `L/4`.
pub fn random_smooth_field(grid: &Arc<Grid>, h1_radius: f64, rng: &mut impl Rng) -> Field {
    let base = random_band_limited(grid, 32.min(grid.n_points()), 1.0, rng);
    let width = 0.25 * grid.half_length();
    let samples: Vec<f64> = base
        .samples()
        .iter()
        .zip(grid.xs())
        .map(|(v, x)| v * (-(x / width).powi(2)).exp())
        .collect();
    let f = Field::from_samples(grid, samples).expect("finite by construction");
    let norm = f.sobolev_norm(1.0);
    if norm == 0.0 || h1_radius == 0.0 {
        Field::zeros(grid)
    } else {
        f.scale(h1_radius / norm)
    }
}

/// For each projector size, the largest observed `‖Q_N(χ f)‖ / ‖f‖_s` over
/// seeded band-limited test fields.
pub fn verify_cutoff_lemma_with(
    chi: &Field,
    n_list: &[usize],
    s: f64,
    trials: usize,
    band: usize,
    seed: u64,
) -> Result<Vec<CutoffRow>> {
    if !(s > 0.0) {
        return Err(invalid("s", "Sobolev index must be positive"));
    }
    if trials == 0 {
        return Err(invalid("trials", "need at least one trial"));
    }
    let grid = chi.grid();
    let mut rng = stream(seed, StreamTag::TestField, 0);
    let fields: Vec<Field> = (0..trials)
        .map(|_| random_band_limited(grid, band, s, &mut rng))
        .collect();
    let products: Vec<(Field, f64)> = fields
        .iter()
        .map(|f| Ok((chi.mul(f)?, sobolev_norm(f, s))))
        .collect::<Result<_>>()?;
    n_list
        .iter()
        .map(|&n_modes| {
            let proj = SpectralProjector::new(n_modes);
            let mut sup = 0.0f64;
            for (g, fs) in &products {
                if *fs == 0.0 {
                    continue;
                }
                let q = project(g, &proj, ProjectionSide::Q)?;
                sup = sup.max(q.l2_norm() / fs);
            }
            Ok(CutoffRow {
                n_modes,
                sup_ratio: sup,
            })
        })
        .collect()
}

pub fn verify_cutoff_lemma(
    grid: &Arc<Grid>,
    n_list: &[usize],
    a: f64,
    s: f64,
    trials: usize,
    seed: u64,
) -> Result<Vec<CutoffRow>> {
    let chi = cutoff_chi(a, grid)?;
    verify_cutoff_lemma_with(&chi, n_list, s, trials, grid.n_points() / 4, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid(l: f64, n: usize) -> Arc<Grid> {
        make_grid(l, n).unwrap()
    }

    #[test]
    fn wavenumbers_for_unit_box() {
        let g = grid(PI, 8);
        let w = g.sorted_wavenumbers();
        let expected = [-4.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn dx_for_default_box() {
        let g = grid(16.0 * PI, 256);
        assert!((g.dx() - PI / 8.0).abs() < 1e-15);
        assert!((g.dx() * 256.0 - 2.0 * g.half_length()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(make_grid(PI, 7).is_err());
        assert!(make_grid(PI, 6).is_err());
        assert!(make_grid(0.0, 8).is_err());
        assert!(make_grid(-1.0, 8).is_err());
    }

    #[test]
    fn rejects_non_finite_samples() {
        let g = grid(PI, 8);
        let mut s = vec![0.0; 8];
        s[3] = f64::NAN;
        assert!(Field::from_samples(&g, s).is_err());
    }

    #[test]
    fn zero_field_has_zero_norms() {
        let g = grid(PI, 16);
        let z = Field::zeros(&g);
        for s in [0.0, 1.0, 2.5] {
            assert_eq!(sobolev_norm(&z, s), 0.0);
        }
    }

    #[test]
    fn single_mode_h1_norm() {
        let g = grid(PI, 32);
        let f = Field::from_fn(&g, |x| (2.0 * x).cos()).unwrap();
        let f = f.scale(1.0 / f.l2_norm());
        assert!((sobolev_norm(&f, 1.0) - 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn basis_is_orthonormal() {
        let g = grid(3.0, 16);
        let fields: Vec<Field> = (0..16).map(|i| basis_function(&g, i).unwrap()).collect();
        for i in 0..16 {
            for j in 0..16 {
                let ip = fields[i].inner(&fields[j]);
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((ip - expected).abs() < 1e-12, "({i},{j}) -> {ip}");
            }
        }
    }

    #[test]
    fn basis_is_centred_at_origin() {
        let g = grid(PI, 16);
        let e = basis_function(&g, 1).unwrap();
        let expected = Field::from_fn(&g, |x| x.cos() / PI.sqrt()).unwrap();
        for (a, b) in e.samples().iter().zip(expected.samples()) {
            assert!((a - b).abs() < 1e-13);
        }
        let s = basis_function(&g, 2).unwrap();
        let expected = Field::from_fn(&g, |x| x.sin() / PI.sqrt()).unwrap();
        for (a, b) in s.samples().iter().zip(expected.samples()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn real_coefficients_recover_expansion() {
        let g = grid(5.0, 32);
        let mut rng = stream(3, StreamTag::TestField, 0);
        let f = random_band_limited(&g, 32, 0.0, &mut rng);
        let mut rebuilt = Field::zeros(&g);
        for i in 0..32 {
            let c = real_coefficient(&g, f.coefficients(), i);
            rebuilt = rebuilt
                .add(&basis_function(&g, i).unwrap().scale(c))
                .unwrap();
        }
        for (a, b) in rebuilt.samples().iter().zip(f.samples()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projector_edge_sizes() {
        let g = grid(4.0, 32);
        let mut rng = stream(1, StreamTag::TestField, 0);
        let f = random_band_limited(&g, 32, 0.0, &mut rng);
        let full = SpectralProjector::new(32);
        let p = project(&f, &full, ProjectionSide::P).unwrap();
        for (a, b) in p.samples().iter().zip(f.samples()) {
            assert!((a - b).abs() < 1e-13);
        }
        let none = SpectralProjector::new(0);
        assert!(project(&f, &none, ProjectionSide::P).unwrap().max_abs() < 1e-15);
        let q = project(&f, &none, ProjectionSide::Q).unwrap();
        for (a, b) in q.samples().iter().zip(f.samples()) {
            assert!((a - b).abs() < 1e-13);
        }
        assert!(project(&f, &SpectralProjector::new(33), ProjectionSide::P).is_err());
    }

    #[test]
    fn projector_pythagoras_n5() {
        let g = grid(4.0, 32);
        let mut rng = stream(2, StreamTag::TestField, 0);
        let f = random_band_limited(&g, 32, 0.0, &mut rng);
        let proj = SpectralProjector::new(5);
        let p = project(&f, &proj, ProjectionSide::P).unwrap();
        let q = project(&f, &proj, ProjectionSide::Q).unwrap();
        let lhs = p.l2_norm().powi(2) + q.l2_norm().powi(2);
        assert!((lhs - f.l2_norm().powi(2)).abs() < 1e-12 * f.l2_norm().powi(2));
        assert!(p.inner(&q).abs() < 1e-12);
    }

    #[test]
    fn projector_keeps_cos_before_sin() {
        let g = grid(PI, 16);
        let proj = SpectralProjector::new(2);
        let c = basis_function(&g, 1).unwrap();
        let s = basis_function(&g, 2).unwrap();
        let pc = project(&c, &proj, ProjectionSide::P).unwrap();
        let ps = project(&s, &proj, ProjectionSide::P).unwrap();
        assert!((pc.l2_norm() - 1.0).abs() < 1e-13);
        assert!(ps.l2_norm() < 1e-14);
    }

    #[test]
    fn psi_weight_vanishes_at_time_zero() {
        let g = grid(16.0 * PI, 64);
        let w = WeightProfile::new(&g);
        let f = Field::from_fn(&g, |x| 1.0 + x.sin()).unwrap();
        assert_eq!(weighted_norm(&f, &w, 0.0, WeightMode::Psi).unwrap(), 0.0);
        assert!(weighted_norm(&f, &w, -1.0, WeightMode::Psi).is_err());
    }

    #[test]
    fn phi_weight_of_constant_is_phi_norm() {
        let g = grid(10.0, 64);
        let w = WeightProfile::new(&g);
        let one = Field::from_fn(&g, |_| 1.0).unwrap();
        let phi_field = Field::from_samples(&g, w.phi_values().to_vec()).unwrap();
        let got = weighted_norm(&one, &w, 0.0, WeightMode::Phi).unwrap();
        assert!((got - phi_field.l2_norm()).abs() < 1e-13);
    }

    #[test]
    fn cutoff_shape() {
        let a = 4.0;
        assert_eq!(cutoff_value(a, 0.0), 1.0);
        assert_eq!(cutoff_value(a, a), 0.0);
        assert_eq!(cutoff_value(a, -a), 0.0);
        let mid = cutoff_value(a, 0.75 * a);
        assert!(mid > 0.0 && mid < 1.0);
        let mut prev = 1.0;
        for k in 0..=100 {
            let x = 0.5 * a + 0.5 * a * k as f64 / 100.0;
            let v = cutoff_value(a, x);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
        let g = grid(3.0, 16);
        assert!(cutoff_chi(4.0, &g).is_err());
    }
}
