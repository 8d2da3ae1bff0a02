use std::f64::consts::PI;
use std::sync::Arc;

use kse_core::rng::{stream, StreamTag};
use kse_core::spectral::{
    basis_function, cutoff_chi, cutoff_value, phi, project, psi, random_band_limited, sobolev_norm,
    verify_cutoff_lemma, verify_cutoff_lemma_with, weighted_norm, Grid, ProjectionSide,
    SpectralProjector, WeightMode, WeightProfile,
};
use kse_core::{make_grid, Field};
use proptest::prelude::*;

fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n).map(|i| f(a + i as f64 * h)).sum();
    h * (0.5 * f(a) + inner + 0.5 * f(b))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn gaussian_sobolev_norm_matches_continuum_quadrature() {
    let g = make_grid(16.0 * PI, 256).unwrap();
    let f = Field::from_fn(&g, |x| (-x * x).exp()).unwrap();
    // ‖f‖_s² = (1/2π) ∫ (1+ξ²)^s |f̂(ξ)|² dξ with f̂(ξ) = √π e^{-ξ²/4}.
    let oracle = |s: f64| {
        let integrand = |xi: f64| (1.0 + xi * xi).powf(s) * PI * (-xi * xi / 2.0).exp();
        (trapezoid(integrand, -40.0, 40.0, 8 * 2048) / (2.0 * PI)).sqrt()
    };
    assert!(rel(sobolev_norm(&f, 2.0), oracle(2.0)) < 1e-6);
    assert!(rel(oracle(2.0), (3.0 * (2.0 * PI).sqrt()).sqrt()) < 1e-12);
    assert!(rel(f.sobolev_norm(0.0), oracle(0.0)) < 1e-6);
    assert!(rel(f.l2_norm(), (PI / 2.0).sqrt().sqrt()) < 1e-10);
}

#[test]
fn gaussian_phi_norm_matches_quadrature() {
    let g = make_grid(16.0 * PI, 256).unwrap();
    let w = WeightProfile::new(&g);
    let f = Field::from_fn(&g, |x| (-x * x).exp()).unwrap();
    let oracle = trapezoid(|x| (phi(x) * (-x * x).exp()).powi(2), -12.0, 12.0, 8 * 4096).sqrt();
    let got = weighted_norm(&f, &w, 0.0, WeightMode::Phi).unwrap();
    assert!(rel(got, oracle) < 1e-6, "{got} vs {oracle}");
}

#[test]
fn cutoff_values_at_centre_edge_and_band() {
    let g = make_grid(8.0 * PI, 128).unwrap();
    let a = 10.0;
    let chi = cutoff_chi(a, &g).unwrap();
    let j0 = (0..g.n_points()).find(|&j| g.x(j) == 0.0).unwrap();
    assert_eq!(chi.samples()[j0], 1.0);
    assert_eq!(cutoff_value(a, a), 0.0);
    assert_eq!(cutoff_value(a, -a), 0.0);
    let mid = cutoff_value(a, 0.75 * a);
    assert!(mid > 0.0 && mid < 1.0);
    let band: Vec<f64> = (0..=100)
        .map(|i| cutoff_value(a, 0.5 * a + 0.5 * a * i as f64 / 100.0))
        .collect();
    assert!(band.windows(2).all(|w| w[1] <= w[0]));
    assert!(cutoff_chi(0.0, &g).is_err());
    assert!(cutoff_chi(2.0 * g.half_length(), &g).is_err());
}

#[test]
fn cutoff_lemma_retained_modes_give_zero() {
    let g = make_grid(8.0 * PI, 128).unwrap();
    let one = Field::from_fn(&g, |_| 1.0).unwrap();
    for n in [4, 9, 16] {
        let rows = verify_cutoff_lemma_with(&one, &[n], 1.0, 8, n, 3).unwrap();
        assert!(rows[0].sup_ratio < 1e-12, "N={n}: {}", rows[0].sup_ratio);
    }
}

#[test]
fn cutoff_lemma_without_projection_is_a_bounded_multiplier() {
    let g = make_grid(8.0 * PI, 128).unwrap();
    let a = 12.0;
    let chi = cutoff_chi(a, &g).unwrap();
    let (trials, band, s, seed) = (16, 32, 1.0, 5);
    let rows = verify_cutoff_lemma_with(&chi, &[0], s, trials, band, seed).unwrap();
    let mut rng = stream(seed, StreamTag::TestField, 0);
    let oracle = (0..trials)
        .map(|_| {
            let f = random_band_limited(&g, band, s, &mut rng);
            let chif: Vec<f64> = f
                .samples()
                .iter()
                .zip(chi.samples())
                .map(|(a, b)| a * b)
                .collect();
            let norm = (chif.iter().map(|v| v * v).sum::<f64>() * g.dx()).sqrt();
            norm / f.sobolev_norm(s)
        })
        .fold(0.0, f64::max);
    assert!(rel(rows[0].sup_ratio, oracle) < 1e-12);
    assert!(rows[0].sup_ratio <= 1.0);
}

/// `‖Q_N g‖` through explicit Gram-Schmidt-free projection on the basis.
fn q_norm_by_basis(g: &Field, n_modes: usize, basis: &[Field]) -> f64 {
    let mut rest = g.clone();
    for e in &basis[..n_modes] {
        rest = rest.sub(&e.scale(g.inner(e))).unwrap();
    }
    rest.l2_norm()
}

#[test]
fn cutoff_lemma_sweep_decreases_and_matches_brute_force() {
    let g = make_grid(8.0 * PI, 128).unwrap();
    let (a, s, trials, seed) = (12.0, 1.0, 12, 8);
    let ns = [4, 8, 16, 32];
    let rows = verify_cutoff_lemma(&g, &ns, a, s, trials, seed).unwrap();
    assert!(rows.windows(2).all(|w| w[1].sup_ratio < w[0].sup_ratio));

    let chi = cutoff_chi(a, &g).unwrap();
    let basis: Vec<Field> = (0..32).map(|i| basis_function(&g, i).unwrap()).collect();
    let mut rng = stream(seed, StreamTag::TestField, 0);
    let fields: Vec<Field> = (0..trials)
        .map(|_| random_band_limited(&g, g.n_points() / 4, s, &mut rng))
        .collect();
    for row in &rows {
        let brute = fields
            .iter()
            .map(|f| q_norm_by_basis(&chi.mul(f).unwrap(), row.n_modes, &basis) / f.sobolev_norm(s))
            .fold(0.0, f64::max);
        assert!(rel(row.sup_ratio, brute) < 1e-9, "N={}", row.n_modes);
    }
}

fn grid64() -> Arc<Grid> {
    make_grid(4.0 * PI, 64).unwrap()
}

fn field_strategy() -> impl Strategy<Value = Field> {
    prop::collection::vec(-5.0f64..5.0, 64).prop_map(|v| Field::from_samples(&grid64(), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transform_round_trip(f in field_strategy()) {
        let g = f.grid();
        let back = g.inverse(&g.forward(f.samples()));
        let scale = f.max_abs().max(1e-300);
        for (a, b) in back.iter().zip(f.samples()) {
            prop_assert!((a - b).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn parseval(f in field_strategy()) {
        let g = f.grid();
        let physical = (f.samples().iter().map(|v| v * v).sum::<f64>() * g.dx()).sqrt();
        let spectral = (f.coefficients().iter().map(|c| c.norm_sqr()).sum::<f64>()
            * 2.0 * g.half_length()).sqrt();
        prop_assert!((physical - spectral).abs() <= 1e-12 * physical.max(1e-300));
        prop_assert!((f.l2_norm() - physical).abs() <= 1e-12 * physical.max(1e-300));
    }

    #[test]
    fn sobolev_norm_is_nondecreasing_in_s(f in field_strategy(), s in 0.0f64..3.0, ds in 0.0f64..2.0) {
        prop_assert!(sobolev_norm(&f, s) <= sobolev_norm(&f, s + ds) * (1.0 + 1e-14));
    }

    #[test]
    fn psi_is_ordered_below_phi(x in -100.0f64..100.0, t1 in 1e-3f64..50.0, dt in 1e-3f64..50.0) {
        let (a, b) = (psi(t1, x), psi(t1 + dt, x));
        // ψ rounds to φ once t/φ is large.
        prop_assert!(0.0 < a && a <= b && b <= phi(x));
        prop_assert!(a < b || b == phi(x));
    }

    #[test]
    fn projector_algebra(f in field_strategy(), n in 0usize..64) {
        let p = SpectralProjector::new(n);
        let pf = project(&f, &p, ProjectionSide::P).unwrap();
        let qf = project(&f, &p, ProjectionSide::Q).unwrap();
        let pqf = project(&qf, &p, ProjectionSide::P).unwrap();
        prop_assert!(pqf.l2_norm() <= 1e-12 * f.l2_norm().max(1e-300));
        // Each coefficient lands wholly on one side, so P + Q is the identity bit for bit.
        for ((a, b), c) in pf.coefficients().iter().zip(qf.coefficients()).zip(f.coefficients()) {
            prop_assert_eq!(a + b, *c);
        }
        let next = project(&f, &SpectralProjector::new(n + 1), ProjectionSide::Q).unwrap();
        prop_assert!(next.l2_norm() <= qf.l2_norm() * (1.0 + 1e-14));
    }
}
