use std::f64::consts::PI;
use std::sync::Arc;

use kse_core::dynamics::{default_forcing, simulate, NoiseModel, SimParams};
use kse_core::functionals::{
    compute_functionals, energy_residual, lyapunov_f, stopping_time_tau, supermartingale_excess,
    Functional, FunctionalSeries, NormSeries, StoppingTime, ThresholdParams, P1,
};
use kse_core::rng::{stream, StreamTag};
use kse_core::spectral::{random_smooth_field, WeightProfile};
use kse_core::stats::par_map_indexed;
use kse_core::{make_grid, Field, Grid, LabError};
use proptest::prelude::*;

fn grid() -> Arc<Grid> {
    make_grid(8.0 * PI, 64).unwrap()
}

fn smooth(g: &Arc<Grid>, radius: f64, seed: u64) -> Field {
    random_smooth_field(g, radius, &mut stream(seed, StreamTag::InitialData, 0))
}

fn flat_series(l2: &[f64], dt: f64) -> FunctionalSeries {
    let z = vec![0.0; l2.len()];
    FunctionalSeries::from_norms(
        NormSeries {
            dt,
            l2,
            h2: &z,
            psi_l2: &z,
            psi_h2: &z,
            psi_uxx: &z,
        },
        1.0,
        &[1.0, P1],
    )
    .unwrap()
}

#[test]
fn zero_trajectory_has_zero_functionals() {
    let g = grid();
    let p = SimParams::new(&g, 1.0, 0.01, 1.0).unwrap();
    let traj = simulate(&Field::zeros(&g), &NoiseModel::unforced(&g), &p).unwrap();
    let s = compute_functionals(&traj, &WeightProfile::new(&g), &[1.0]).unwrap();
    for v in [&s.e_u, &s.e_psi, &s.f_psi, &s.e_p[0].1] {
        assert!(v.iter().all(|&x| x == 0.0));
    }
    let th = ThresholdParams::new(1.0, 1.0, 1.0, 0.5).unwrap();
    assert_eq!(
        stopping_time_tau(&s, &th, P1),
        StoppingTime::Censored { horizon: 1.0 }
    );
    assert_eq!(
        supermartingale_excess(&s, Functional::Energy, 1.0, 0.0).unwrap(),
        0.0
    );
}

#[test]
fn constant_norms_give_linear_energy() {
    let dt = 0.1;
    let n = 11;
    let (l2, h2) = (vec![2.0; n], vec![3.0; n]);
    let z = vec![0.0; n];
    let a = 0.5;
    let s = FunctionalSeries::from_norms(
        NormSeries {
            dt,
            l2: &l2,
            h2: &h2,
            psi_l2: &z,
            psi_h2: &z,
            psi_uxx: &z,
        },
        a,
        &[],
    )
    .unwrap();
    for (k, e) in s.e_u.iter().enumerate() {
        let t = k as f64 * dt;
        assert!((e - (4.0 + a * 9.0 * t)).abs() < 1e-12);
    }
}

#[test]
fn linear_functional_with_slope_k_has_zero_excess() {
    let dt = 0.25;
    // ‖u‖² = 1 + 3t, so E_u has slope exactly 3.
    let l2: Vec<f64> = (0..41)
        .map(|k| (1.0 + 3.0 * k as f64 * dt).sqrt())
        .collect();
    let s = flat_series(&l2, dt);
    let ex = supermartingale_excess(&s, Functional::Energy, 3.0, 0.0).unwrap();
    assert!(ex.abs() < 1e-12);
    let ex = supermartingale_excess(&s, Functional::Energy, 3.0, 2.5).unwrap();
    assert!(ex.abs() < 1e-12);
    assert!(supermartingale_excess(&s, Functional::Energy, 3.0, 0.3).is_err());
    assert!(matches!(
        supermartingale_excess(&s, Functional::Moment(3.0), 3.0, 0.0),
        Err(LabError::InsufficientData(_))
    ));
}

#[test]
fn unforced_energy_stays_below_initial_energy() {
    let g = make_grid(8.0 * PI, 128).unwrap();
    let p = SimParams::new(&g, 0.7, 1e-3, 2.0).unwrap();
    let noise = NoiseModel::unforced(&g);
    for seed in 0..3 {
        let u0 = smooth(&g, 3.0, seed);
        let traj = simulate(&u0, &noise, &p).unwrap();
        let s = compute_functionals(&traj, &WeightProfile::new(&g), &[]).unwrap();
        // (1+ξ²)² ≤ 2(1+ξ⁴) and a₀ ≤ a bound a₀‖u‖₂² by the dissipation
        // 2(a‖u‖² + ‖u_xx‖²) of the energy balance.
        let e0 = u0.l2_norm().powi(2);
        assert!(s.e_u.iter().all(|&e| e <= e0 * (1.0 + 1e-3)));
        let worst = energy_residual(&traj, &noise)
            .iter()
            .fold(0.0f64, |m, r| m.max(r.abs()));
        assert!(worst < 1e-2 * e0, "balance residual {worst}");
    }
}

#[test]
fn psi_energy_starts_at_the_plain_energy() {
    let g = grid();
    let p = SimParams::new(&g, 1.0, 0.01, 0.5).unwrap();
    let noise = NoiseModel::uniform(8, 1.0, default_forcing(&g, 1.0).unwrap(), 3).unwrap();
    for seed in 0..4 {
        let u0 = smooth(&g, 2.0, seed);
        let traj = simulate(&u0, &noise, &p).unwrap();
        let s = compute_functionals(&traj, &WeightProfile::new(&g), &[1.0]).unwrap();
        assert_eq!(s.e_psi[0], traj.diagnostics.l2[0].powi(2));
        assert_eq!(s.f_psi[0], 0.0);
        assert!((s.e_psi[0] - u0.l2_norm().powi(2)).abs() < 1e-12 * s.e_psi[0]);
    }
}

#[test]
fn unweighted_trajectory_is_rejected() {
    let g = grid();
    let mut p = SimParams::new(&g, 1.0, 0.01, 0.1).unwrap();
    p.weighted_diagnostics = false;
    let traj = simulate(&smooth(&g, 1.0, 0), &NoiseModel::unforced(&g), &p).unwrap();
    assert!(compute_functionals(&traj, &WeightProfile::new(&g), &[]).is_err());
    let other = make_grid(4.0 * PI, 64).unwrap();
    p.weighted_diagnostics = true;
    let traj = simulate(&smooth(&g, 1.0, 0), &NoiseModel::unforced(&g), &p).unwrap();
    assert_eq!(
        compute_functionals(&traj, &WeightProfile::new(&other), &[]).unwrap_err(),
        LabError::GridMismatch
    );
}

/// `1 + Σ(1+ξ²)|ĉ|²·2L + (Σ|ĉ|²·2L)^{11/5}` straight from the coefficients.
fn lyapunov_oracle(u: &Field) -> f64 {
    let g = u.grid();
    let two_l = 2.0 * g.half_length();
    let mut h1 = 0.0;
    let mut l2 = 0.0;
    for (c, xi) in u.coefficients().iter().zip(g.wavenumbers()) {
        l2 += c.norm_sqr() * two_l;
        h1 += (1.0 + xi * xi) * c.norm_sqr() * two_l;
    }
    1.0 + h1 + l2.powf(11.0 / 5.0)
}

#[test]
fn lyapunov_function_values() {
    let g = grid();
    assert_eq!(lyapunov_f(&Field::zeros(&g)), 1.0);
    for seed in 0..8 {
        let u = smooth(&g, 1.0 + seed as f64, seed);
        let (got, want) = (lyapunov_f(&u), lyapunov_oracle(&u));
        assert!((got - want).abs() <= 1e-12 * want);
    }
}

#[test]
fn unit_norms_give_three() {
    // Constant c on [−L, L): ‖c‖² = ‖c‖₁² = 2Lc².
    let g = grid();
    let c = (1.0 / (2.0 * g.half_length())).sqrt();
    let u = Field::from_fn(&g, |_| c).unwrap();
    assert!((lyapunov_f(&u) - 3.0).abs() < 1e-12);
}

#[test]
fn manufactured_crossing_at_two() {
    let dt = 0.25;
    // Threshold with K + L = 1, ρ = 1, M = 1 and u(0) = 0 is t + 2;
    // ‖u(t)‖² = t(t+2)/2 meets it exactly at t = 2.
    let th = ThresholdParams::new(0.5, 0.5, 1.0, 1.0).unwrap();
    let l2: Vec<f64> = (0..=16)
        .map(|k| {
            let t = k as f64 * dt;
            (t * (t + 2.0) / 2.0).sqrt()
        })
        .collect();
    let s = flat_series(&l2, dt);
    assert_eq!(stopping_time_tau(&s, &th, P1), StoppingTime::Hit { t: 2.0 });

    // Slightly below at t = 2 moves the hit to the next grid time.
    let l2: Vec<f64> = (0..=16)
        .map(|k| {
            let t = k as f64 * dt;
            (0.999 * t * (t + 2.0) / 2.0).sqrt()
        })
        .collect();
    assert_eq!(
        stopping_time_tau(&flat_series(&l2, dt), &th, P1),
        StoppingTime::Hit { t: 2.25 }
    );
}

#[test]
fn threshold_constants_are_validated() {
    assert!(ThresholdParams::new(1.0, 1.0, 0.5, 1.0).is_err());
    assert!(ThresholdParams::new(-1.0, 1.0, 1.0, 1.0).is_err());
    assert!(ThresholdParams::new(1.0, 1.0, 1.0, f64::NAN).is_err());
}

/// Empirical `P(τ ≤ T)` falls as `ρ` grows.
#[test]
fn stopping_probability_decays_in_rho() {
    let g = grid();
    let mut p = SimParams::new(&g, 0.5, 2e-3, 2.0).unwrap();
    p.record_every = p.steps();
    p.record_noise = false;
    let noise = NoiseModel::uniform(16, 3.0, default_forcing(&g, 1.0).unwrap(), 0).unwrap();
    let u0 = Field::zeros(&g);
    let w = WeightProfile::new(&g);
    let series: Vec<FunctionalSeries> = par_map_indexed(96, |i| {
        let traj = simulate(&u0, &noise.with_seed(i as u64), &p).unwrap();
        compute_functionals(&traj, &w, &[]).unwrap()
    });
    let rhos = [0.0, 50.0, 100.0, 200.0, 400.0];
    let hits: Vec<usize> = rhos
        .iter()
        .map(|&rho| {
            let th = ThresholdParams::new(150.0, 150.0, 1.0, rho).unwrap();
            series
                .iter()
                .filter(|s| stopping_time_tau(s, &th, P1).is_hit())
                .count()
        })
        .collect();
    assert!(hits.windows(2).all(|w| w[1] <= w[0]), "{hits:?}");
    assert!(hits[0] > 48, "{hits:?}");
    assert!(*hits.last().unwrap() < hits[0] / 4, "{hits:?}");
}

fn series_strategy() -> impl Strategy<Value = FunctionalSeries> {
    prop::collection::vec(0.0f64..4.0, 2..40).prop_map(|incs| {
        let mut acc = 0.0;
        let l2: Vec<f64> = incs
            .iter()
            .map(|d| {
                acc += d - 1.5;
                acc.abs()
            })
            .collect();
        flat_series(&l2, 0.1)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn raising_any_threshold_constant_never_hastens_tau(
        s in series_strategy(),
        k in 0.0f64..5.0, l in 0.0f64..5.0, m in 1.0f64..3.0, rho in 0.0f64..10.0,
        which in 0usize..4, bump in 0.0f64..5.0,
    ) {
        let base = ThresholdParams::new(k, l, m, rho).unwrap();
        let mut raised = base;
        match which {
            0 => raised.k += bump,
            1 => raised.l += bump,
            2 => raised.m += bump,
            _ => raised.rho += bump,
        }
        let t0 = stopping_time_tau(&s, &base, P1).value_or_inf();
        let t1 = stopping_time_tau(&s, &raised, P1).value_or_inf();
        prop_assert!(t1 >= t0);
    }

    #[test]
    fn integral_parts_are_nondecreasing(s in series_strategy()) {
        for k in 1..s.len() {
            let int_now = s.e_p[0].1[k] - s.l2[k].powi(2);
            let int_before = s.e_p[0].1[k - 1] - s.l2[k - 1].powi(2);
            prop_assert!(int_now >= int_before - 1e-12);
        }
    }
}
