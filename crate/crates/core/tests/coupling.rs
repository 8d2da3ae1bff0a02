use std::f64::consts::PI;
use std::sync::Arc;

use kse_core::coupling::{
    drift_bound_series, dyadic_lattice, foias_prodi_check, girsanov_drift, novikov_integral,
    perturb, run_coupled, squeezing_stats, tv_bound, CoupledRun, DecoupledBy, FpVariant,
    SqueezeConfig,
};
use kse_core::dynamics::{default_forcing, simulate, simulate_linear, NoiseModel, SimParams};
use kse_core::functionals::ThresholdParams;
use kse_core::rng::{stream, StreamTag};
use kse_core::spectral::random_smooth_field;
use kse_core::{make_grid, Field, Grid};
use proptest::prelude::*;

fn grid() -> Arc<Grid> {
    make_grid(8.0 * PI, 64).unwrap()
}

fn smooth(g: &Arc<Grid>, radius: f64, seed: u64) -> Field {
    random_smooth_field(g, radius, &mut stream(seed, StreamTag::InitialData, 0))
}

fn loose() -> ThresholdParams {
    ThresholdParams::new(1e4, 1e4, 1.0, 1e4).unwrap()
}

fn setup(t_end: f64) -> (Arc<Grid>, SimParams, NoiseModel) {
    let g = grid();
    let p = SimParams::new(&g, 1.0, 2e-3, t_end).unwrap();
    let noise = NoiseModel::uniform(16, 1.0, default_forcing(&g, 1.0).unwrap(), 21).unwrap();
    (g, p, noise)
}

fn generic_run(n_modes: usize, seed: u64) -> CoupledRun {
    let (g, p, noise) = setup(2.0);
    let u0 = smooth(&g, 3.0, seed);
    let u0p = perturb(&u0, 1.0, &mut stream(seed, StreamTag::InitialData, 1)).unwrap();
    run_coupled(&u0, &u0p, n_modes, &noise.with_seed(seed), &p, &loose()).unwrap()
}

#[test]
fn equal_data_never_separate() {
    let (g, p, noise) = setup(1.0);
    let u0 = smooth(&g, 3.0, 1);
    for n_modes in [0, 4, 16, 64] {
        let run = run_coupled(&u0, &u0, n_modes, &noise, &p, &loose()).unwrap();
        assert!(run.w_l2.iter().all(|&w| w == 0.0));
        assert!(run.w_h1.iter().all(|&w| w == 0.0));
        assert!(run.drift_sq.iter().all(|&a| a == 0.0));
        assert_eq!(novikov_integral(&run), 0.0);
        if (1..=16).contains(&n_modes) {
            assert_eq!(tv_bound(novikov_integral(&run), run.b_min).unwrap(), 0.0);
        }
        let fp = foias_prodi_check(&run, FpVariant::Part1, 0.0, 0.0, Some(0.0)).unwrap();
        assert_eq!(fp.min_c, 0.0);
        assert_eq!(fp.certificate, Some(true));
    }
}

#[test]
fn lanes_share_the_noise_and_start_apart_by_the_data_gap() {
    let (g, p, noise) = setup(0.5);
    let u0 = smooth(&g, 3.0, 2);
    let u0p = smooth(&g, 1.0, 3);
    let run = run_coupled(&u0, &u0p, 8, &noise, &p, &loose()).unwrap();
    let log = |t: &kse_core::dynamics::Trajectory| t.noise_log.clone().unwrap().increments;
    assert_eq!(log(&run.u), log(&run.v));
    assert_eq!(log(&run.u), log(&run.u_prime));
    let gap = u0.sub(&u0p).unwrap().sobolev_norm(1.0);
    assert!((run.w_h1[0] - gap).abs() < 1e-12 * gap);
    // The synchronous copy is the plain solution from u0′.
    let alone = simulate(&u0p, &noise, &p).unwrap();
    let diff = alone.final_state().sub(run.u_prime.final_state()).unwrap();
    assert!(diff.max_abs() < 1e-12);
}

#[test]
fn full_projection_is_the_linear_flow() {
    let (g, p, noise) = setup(1.0);
    let u0 = smooth(&g, 3.0, 4);
    let u0p = smooth(&g, 2.0, 5);
    let run = run_coupled(&u0, &u0p, g.n_points(), &noise, &p, &loose()).unwrap();
    let (lin, _) = simulate_linear(&u0.sub(&u0p).unwrap(), &p).unwrap();
    for (w, z) in run.w_h1.iter().zip(&lin.diagnostics.h1) {
        assert!((w - z).abs() <= 1e-10 * lin.diagnostics.h1[0]);
    }
    let fp = foias_prodi_check(&run, FpVariant::Part1, 0.0, 0.0, None).unwrap();
    assert!(fp.min_c <= 1e-10, "min C {}", fp.min_c);
}

#[test]
fn foias_prodi_constant_is_the_sharp_one() {
    let run = generic_run(16, 6);
    let fp = foias_prodi_check(&run, FpVariant::Part1, 0.0, 0.0, None).unwrap();
    assert!(fp.pairs.len() <= 256);
    let c = fp.min_c;
    assert!(c.is_finite());
    let du = &run.u.diagnostics;
    let dv = &run.v.diagnostics;
    // Independent left-Riemann-free check: trapezoid on the raw norms, every lattice pair.
    let check = |c: f64| {
        fp.pairs.iter().all(|pair| {
            let i = (pair.s / run.dt).round() as usize;
            let j = (pair.t / run.dt).round() as usize;
            let f = |k: usize| du.h1[k].powi(2) + dv.h1[k].powi(2);
            let integral: f64 = (i..j).map(|k| 0.5 * run.dt * (f(k) + f(k + 1))).sum();
            let lhs = run.w_h1[j].powi(2);
            let rhs = run.w_h1[i].powi(2) * (-run.a * (pair.t - pair.s) + c * integral).exp();
            lhs <= rhs * (1.0 + 1e-9)
        })
    };
    assert!(check(c));
    if c > 0.0 {
        assert!(!check(0.9 * c));
    }
    let certified = foias_prodi_check(&run, FpVariant::Part1, 0.0, 0.0, Some(c)).unwrap();
    assert_eq!(certified.certificate, Some(true));
    let tight = foias_prodi_check(&run, FpVariant::Part1, 0.0, 0.0, Some(0.5 * c)).unwrap();
    assert_eq!(tight.certificate, Some(c == 0.0));
}

#[test]
fn foias_prodi_part_two_needs_burn_in() {
    let run = generic_run(16, 7);
    assert!(foias_prodi_check(&run, FpVariant::Part2, 0.1, 0.0, None).is_err());
    assert!(foias_prodi_check(&run, FpVariant::Part2, 0.0, 0.5, None).is_err());
    let fp = foias_prodi_check(&run, FpVariant::Part2, 0.1, 0.5, None).unwrap();
    assert!(fp.pairs.iter().all(|p| p.s >= 0.5 - 1e-12));
}

#[test]
fn minimal_constant_shrinks_with_projector_size() {
    let cs: Vec<f64> = [0, 4, 8, 16, 32]
        .iter()
        .map(|&n| {
            let run = generic_run(n, 8);
            foias_prodi_check(&run, FpVariant::Part1, 0.0, 0.0, None)
                .unwrap()
                .min_c
        })
        .collect();
    assert!(cs.windows(2).all(|w| w[1] <= w[0]), "{cs:?}");
}

#[test]
fn no_projection_means_no_drift() {
    let run = generic_run(0, 9);
    assert!(run.drift_sq.iter().all(|&a| a == 0.0));
    assert_eq!(novikov_integral(&run), 0.0);
    assert_eq!(girsanov_drift(&run, 1.0).unwrap().max_abs(), 0.0);
}

#[test]
fn drift_respects_the_bilinear_bound() {
    for n in [4, 16, 32] {
        let run = generic_run(n, 10);
        for (a, bound) in drift_bound_series(&run) {
            assert!(a <= bound * (1.0 + 1e-12) + 1e-300, "N={n}: {a} > {bound}");
        }
    }
}

#[test]
fn drift_vanishes_after_tau() {
    let (g, p, noise) = setup(2.0);
    let u0 = smooth(&g, 3.0, 11);
    let u0p = perturb(&u0, 1.0, &mut stream(11, StreamTag::InitialData, 1)).unwrap();
    let th = ThresholdParams::new(1.0, 1.0, 1.0, 0.0).unwrap();
    let run = run_coupled(&u0, &u0p, 16, &noise, &p, &th).unwrap();
    let tau = run.tau.time().expect("tight threshold is crossed");
    assert!(tau < 2.0);
    let k_tau = (tau / run.dt).round() as usize;
    assert!(run.drift_sq[k_tau + 1..].iter().all(|&a| a == 0.0));
    assert!(run.drift_sq[..=k_tau].iter().any(|&a| a > 0.0) || k_tau == 0);
    assert_eq!(girsanov_drift(&run, 2.0).unwrap().max_abs(), 0.0);
}

#[test]
fn novikov_integral_stops_at_tau() {
    let (g, p, noise) = setup(2.0);
    let u0 = smooth(&g, 3.0, 11);
    let u0p = perturb(&u0, 1.0, &mut stream(11, StreamTag::InitialData, 1)).unwrap();
    let th = ThresholdParams::new(1.0, 1.0, 1.0, 0.0).unwrap();
    let run = run_coupled(&u0, &u0p, 16, &noise, &p, &th).unwrap();
    let k_tau = (run.tau.time().unwrap() / run.dt).round() as usize;
    let oracle: f64 = (0..k_tau)
        .map(|k| 0.5 * run.dt * (run.drift_sq[k] + run.drift_sq[k + 1]))
        .sum();
    assert!((novikov_integral(&run) - oracle).abs() <= 1e-12 * oracle);
    let series = run.novikov_series();
    assert!(series[k_tau..].iter().all(|&v| v == series[k_tau]));
}

#[test]
fn novikov_grows_with_the_initial_distance() {
    let (g, p, noise) = setup(1.0);
    let u0 = smooth(&g, 3.0, 14);
    let dir = random_smooth_field(&g, 1.0, &mut stream(14, StreamTag::InitialData, 1));
    let values: Vec<f64> = [0.125, 0.25, 0.5, 1.0]
        .iter()
        .map(|&d| {
            let u0p = u0.add(&dir.scale(d)).unwrap();
            novikov_integral(&run_coupled(&u0, &u0p, 16, &noise, &p, &loose()).unwrap())
        })
        .collect();
    assert!(values.windows(2).all(|w| w[1] > w[0]), "{values:?}");
    // Roughly quadratic at small d.
    let slope = (values[1] / values[0]).log2();
    assert!((1.7..2.3).contains(&slope), "slope {slope}");
}

#[test]
fn tv_bound_examples() {
    assert_eq!(tv_bound(0.0, 0.3).unwrap(), 0.0);
    let b = 0.3;
    let x = 4f64.ln() / 6.0 * b * b;
    assert!((tv_bound(x, b).unwrap() - 0.5).abs() < 1e-14);
    assert!(tv_bound(1.0, 0.0).is_err());
    assert!(tv_bound(-1.0, 1.0).is_err());
}

#[test]
fn lattice_has_at_most_255_pairs() {
    assert!(dyadic_lattice(5, 5).is_empty());
    assert_eq!(
        dyadic_lattice(0, 4),
        vec![(0, 1), (1, 2), (2, 3), (3, 4), (0, 2), (2, 4), (0, 4)]
    );
    let big = dyadic_lattice(100, 100_100);
    assert_eq!(big.len(), 255);
    assert!(big.iter().all(|&(s, t)| 100 <= s && s < t && t <= 100_100));
}

fn squeeze_cfg(d: f64, pairs: usize) -> SqueezeConfig {
    SqueezeConfig {
        n_modes: 16,
        t_window: 1.0,
        d,
        pairs,
        moment_p: 1.0,
        distance_threshold: None,
    }
}

#[test]
fn zero_distance_pairs_never_decouple() {
    let (_, p, noise) = setup(3.0);
    let mut cfg = squeeze_cfg(0.0, 16);
    cfg.n_modes = 8;
    let table = squeezing_stats(&cfg, &noise, &p, &loose(), 3).unwrap();
    assert_eq!(table.sigma_infinite, 16);
    assert_eq!(table.p_sigma_inf, 1.0);
    assert!(table
        .records
        .iter()
        .all(|r| r.sigma.is_none() && r.decoupled_by == DecoupledBy::None));
}

#[test]
fn short_horizon_is_all_censored() {
    let (_, p, noise) = setup(0.5);
    let table = squeezing_stats(&squeeze_cfg(1.0, 4), &noise, &p, &loose(), 3).unwrap();
    assert!(table.rows.is_empty());
    assert!(table.all_censored);
    assert!(table.records.iter().all(|r| r.sigma.is_none()));
    assert!(squeezing_stats(&squeeze_cfg(1.0, 0), &noise, &p, &loose(), 3).is_err());
}

#[test]
fn small_distance_squeezing_decays_fast() {
    let (_, p, noise) = setup(6.0);
    let th = ThresholdParams::new(200.0, 200.0, 1.0, 50.0).unwrap();
    let table = squeezing_stats(&squeeze_cfg(0.5, 128), &noise, &p, &th, 17).unwrap();
    assert!(table.p_sigma_inf > 0.5, "P(σ=∞) = {}", table.p_sigma_inf);
    assert!(table.delta1_hat > 0.0);
    for r in &table.records {
        assert_eq!(r.sigma.is_none(), r.decoupled_by == DecoupledBy::None);
    }
    if let Some(q) = table.q_hat {
        assert!(q > 1.0, "q̂ = {q}");
    }
}

proptest! {
    #[test]
    fn tv_bound_is_monotone(x in 0.0f64..10.0, dx in 1e-9f64..1.0, b in 0.05f64..3.0) {
        let lo = tv_bound(x, b).unwrap();
        let hi = tv_bound(x + dx, b).unwrap();
        prop_assert!((0.0..=1.0).contains(&lo));
        prop_assert!(hi >= lo);
        if hi < 1.0 {
            prop_assert!(hi > lo);
        }
        prop_assert_eq!(lo == 0.0, x == 0.0);
    }
}
