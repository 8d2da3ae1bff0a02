//! Browser bindings: a space-time simulation, the coupling gap against the
//! number of controlled modes, and a squeezing ladder on the Bernoulli toy.

use kse_core::coupling::{perturb, run_coupled};
use kse_core::criterion::{verify_criterion, GeometricToy, HypothesisConstants};
use kse_core::dynamics::{default_forcing, simulate, NoiseModel, SimParams};
use kse_core::functionals::ThresholdParams;
use kse_core::rng::{stream, StreamTag};
use kse_core::spectral::random_smooth_field;
use kse_core::{make_grid, LabError};
use wasm_bindgen::prelude::*;

fn js_err(e: LabError) -> String {
    e.to_string()
}

/// Recorded states stored row by row, one row per frame.
#[wasm_bindgen]
pub struct SpaceTime {
    width: usize,
    times: Vec<f64>,
    values: Vec<f64>,
}

#[wasm_bindgen]
impl SpaceTime {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.times.len()
    }

    pub fn times(&self) -> Vec<f64> {
        self.times.clone()
    }

    pub fn values(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[allow(clippy::too_many_arguments)]
#[wasm_bindgen]
pub fn simulate_spacetime(
    half_length: f64,
    n: usize,
    a: f64,
    forcing: f64,
    noise_modes: usize,
    noise_amplitude: f64,
    t_end: f64,
    dt: f64,
    frames: usize,
    seed: u64,
) -> Result<SpaceTime, String> {
    let grid = make_grid(half_length, n).map_err(js_err)?;
    let h = default_forcing(&grid, forcing).map_err(js_err)?;
    let noise = NoiseModel::uniform(noise_modes, noise_amplitude, h, seed).map_err(js_err)?;
    let mut params = SimParams::new(&grid, a, dt, t_end).map_err(js_err)?;
    params.record_every = (params.steps() / frames.max(1)).max(1);
    let u0 = random_smooth_field(&grid, 1.0, &mut stream(seed, StreamTag::InitialData, 0));
    let traj = simulate(&u0, &noise, &params).map_err(js_err)?;
    let values = traj
        .states
        .iter()
        .flat_map(|s| s.samples().iter().copied())
        .collect();
    Ok(SpaceTime {
        width: n,
        times: traj.times.clone(),
        values,
    })
}

/// `‖u − v‖₁` over time for each requested number of controlled modes.
#[wasm_bindgen]
pub struct GapCurves {
    modes: Vec<usize>,
    times: Vec<f64>,
    gaps: Vec<f64>,
}

#[wasm_bindgen]
impl GapCurves {
    pub fn modes(&self) -> Vec<usize> {
        self.modes.clone()
    }

    pub fn times(&self) -> Vec<f64> {
        self.times.clone()
    }

    /// Curve `i` as a slice of length `times().len()`.
    pub fn curve(&self, i: usize) -> Vec<f64> {
        let len = self.times.len();
        self.gaps[i * len..(i + 1) * len].to_vec()
    }
}

#[wasm_bindgen]
pub fn coupling_gaps(
    modes: Vec<usize>,
    distance: f64,
    t_end: f64,
    seed: u64,
) -> Result<GapCurves, String> {
    let grid = make_grid(8.0 * std::f64::consts::PI, 64).map_err(js_err)?;
    let h = default_forcing(&grid, 1.0).map_err(js_err)?;
    let noise = NoiseModel::uniform(16, 1.0, h, seed).map_err(js_err)?;
    let params = SimParams::new(&grid, 1.0, 2e-3, t_end).map_err(js_err)?;
    let th = ThresholdParams::new(1e4, 1e4, 1.0, 1e4).map_err(js_err)?;
    let u0 = random_smooth_field(&grid, 3.0, &mut stream(seed, StreamTag::InitialData, 0));
    let u0p =
        perturb(&u0, distance, &mut stream(seed, StreamTag::InitialData, 1)).map_err(js_err)?;
    let mut times = Vec::new();
    let mut gaps = Vec::new();
    for &m in &modes {
        let run = run_coupled(&u0, &u0p, m, &noise, &params, &th).map_err(js_err)?;
        if times.is_empty() {
            times = run.times().to_vec();
        }
        gaps.extend_from_slice(&run.w_h1);
    }
    Ok(GapCurves { modes, times, gaps })
}

#[wasm_bindgen]
pub struct LadderSummary {
    p_hat: Vec<f64>,
    bound: Vec<f64>,
    ell_moment: f64,
    ell_moment_stderr: f64,
    exact: f64,
    p_sigma_inf: f64,
}

#[wasm_bindgen]
impl LadderSummary {
    /// Estimated `P(ρ_k < ∞)` for `k = 0, 1, ...`.
    pub fn p_hat(&self) -> Vec<f64> {
        self.p_hat.clone()
    }

    /// `(1 − δ)^k`.
    pub fn bound(&self) -> Vec<f64> {
        self.bound.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn ell_moment(&self) -> f64 {
        self.ell_moment
    }

    #[wasm_bindgen(getter)]
    pub fn ell_moment_stderr(&self) -> f64 {
        self.ell_moment_stderr
    }

    #[wasm_bindgen(getter)]
    pub fn exact(&self) -> f64 {
        self.exact
    }

    #[wasm_bindgen(getter)]
    pub fn p_sigma_inf(&self) -> f64 {
        self.p_sigma_inf
    }
}

#[wasm_bindgen]
pub fn squeezing_ladder(
    success: f64,
    t0: usize,
    s0: usize,
    p0: f64,
    ladders: usize,
    seed: u64,
) -> Result<LadderSummary, String> {
    let toy = GeometricToy::new(success, t0, s0).map_err(js_err)?;
    let constants = HypothesisConstants {
        delta1: success.max(1e-9),
        p: 1.0,
        q: 1.0,
        c: 1.0,
        k: 1.0,
    };
    let rep = verify_criterion(&toy, &constants, ladders, p0, 10_000, 10, seed).map_err(js_err)?;
    Ok(LadderSummary {
        p_hat: rep.rows.iter().map(|r| r.p_hat).collect(),
        bound: rep.rows.iter().map(|r| r.bound).collect(),
        ell_moment: rep.ell_moment,
        ell_moment_stderr: rep.ell_moment_stderr,
        exact: toy.exact_ell_moment(p0),
        p_sigma_inf: rep.p_sigma_inf,
    })
}
