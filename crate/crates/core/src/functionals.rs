//! Weighted energy functionals, the Lyapunov function, stopping times and
//! supermartingale excesses.

use serde::Serialize;

use crate::dynamics::{cumulative_trapezoid, NoiseModel, Trajectory};
use crate::error::{invalid, LabError, Result};
use crate::spectral::{Field, WeightProfile};

pub const P1: f64 = 7.0 / 3.0;
pub const P2: f64 = 11.0 / 5.0;

/// Functionals on the step grid of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FunctionalSeries {
    pub times: Vec<f64>,
    pub a: f64,
    pub a0: f64,
    /// `‖u(t)‖`
    pub l2: Vec<f64>,
    /// `‖u(t)‖² + a₀∫‖u‖₂²`
    pub e_u: Vec<f64>,
    /// `(p, ‖u(t)‖^{2p} + pa∫‖u‖^{2p})` per requested `p`
    pub e_p: Vec<(f64, Vec<f64>)>,
    /// `‖u‖² + ‖ψu‖² + a₀∫(‖u‖₂² + ‖ψu‖₂²)`
    pub e_psi: Vec<f64>,
    /// `‖ψu‖² + a₀∫(‖ψu_xx‖² + ‖ψu‖²)`
    pub f_psi: Vec<f64>,
}

/// Raw per-step norms from which the functionals are assembled.
#[derive(Debug, Clone, Copy)]
pub struct NormSeries<'a> {
    pub dt: f64,
    pub l2: &'a [f64],
    pub h2: &'a [f64],
    pub psi_l2: &'a [f64],
    pub psi_h2: &'a [f64],
    pub psi_uxx: &'a [f64],
}

fn squares(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x * x).collect()
}

impl FunctionalSeries {
    pub fn from_norms(norms: NormSeries<'_>, a: f64, p_list: &[f64]) -> Result<FunctionalSeries> {
        let n = norms.l2.len();
        if [
            norms.h2.len(),
            norms.psi_l2.len(),
            norms.psi_h2.len(),
            norms.psi_uxx.len(),
        ]
        .iter()
        .any(|&m| m != n)
        {
            return Err(LabError::InsufficientData(
                "norm series lengths differ".into(),
            ));
        }
        if !(a > 0.0) {
            return Err(invalid("a", "damping must be positive"));
        }
        let dt = norms.dt;
        let a0 = a.min(1.0);
        let int_h2 = cumulative_trapezoid(&squares(norms.h2), dt);
        let int_psi_h2 = cumulative_trapezoid(&squares(norms.psi_h2), dt);
        let int_psi_l2 = cumulative_trapezoid(&squares(norms.psi_l2), dt);
        let int_psi_uxx = cumulative_trapezoid(&squares(norms.psi_uxx), dt);
        let e_u = (0..n)
            .map(|k| norms.l2[k].powi(2) + a0 * int_h2[k])
            .collect();
        let e_p = p_list
            .iter()
            .map(|&p| {
                let pow: Vec<f64> = norms.l2.iter().map(|x| x.powf(2.0 * p)).collect();
                let int = cumulative_trapezoid(&pow, dt);
                (p, (0..n).map(|k| pow[k] + p * a * int[k]).collect())
            })
            .collect();
        let e_psi = (0..n)
            .map(|k| {
                norms.l2[k].powi(2) + norms.psi_l2[k].powi(2) + a0 * (int_h2[k] + int_psi_h2[k])
            })
            .collect();
        let f_psi = (0..n)
            .map(|k| norms.psi_l2[k].powi(2) + a0 * (int_psi_uxx[k] + int_psi_l2[k]))
            .collect();
        Ok(FunctionalSeries {
            times: (0..n).map(|k| k as f64 * dt).collect(),
            a,
            a0,
            l2: norms.l2.to_vec(),
            e_u,
            e_p,
            e_psi,
            f_psi,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dt(&self) -> f64 {
        if self.times.len() > 1 {
            self.times[1] - self.times[0]
        } else {
            0.0
        }
    }

    pub fn series(&self, which: Functional) -> Result<&[f64]> {
        match which {
            Functional::Energy => Ok(&self.e_u),
            Functional::PsiEnergy => Ok(&self.e_psi),
            Functional::PsiF => Ok(&self.f_psi),
            Functional::Moment(p) => self
                .e_p
                .iter()
                .find(|(q, _)| (q - p).abs() < 1e-12)
                .map(|(_, v)| v.as_slice())
                .ok_or_else(|| {
                    LabError::InsufficientData(format!("moment functional p = {p} not computed"))
                }),
        }
    }
}

/// Assemble the functionals of a trajectory. The trajectory must carry the
/// `ψ`-weighted diagnostics.
pub fn compute_functionals(
    traj: &Trajectory,
    weights: &WeightProfile,
    p_list: &[f64],
) -> Result<FunctionalSeries> {
    if !traj.grid.same_as(weights.grid()) {
        return Err(LabError::GridMismatch);
    }
    if !traj.weighted {
        return Err(LabError::InsufficientData(
            "trajectory was simulated without weighted diagnostics".into(),
        ));
    }
    let d = &traj.diagnostics;
    FunctionalSeries::from_norms(
        NormSeries {
            dt: traj.dt,
            l2: &d.l2,
            h2: &d.h2,
            psi_l2: &d.psi_l2,
            psi_h2: &d.psi_h2,
            psi_uxx: &d.psi_uxx,
        },
        traj.a,
        p_list,
    )
}

/// `F(u) = 1 + ‖u‖₁² + ‖u‖^{2p₂}`.
pub fn lyapunov_f(u: &Field) -> f64 {
    lyapunov_from_norms(u.sobolev_norm(1.0), u.l2_norm())
}

pub fn lyapunov_from_norms(h1: f64, l2: f64) -> f64 {
    1.0 + h1 * h1 + l2.powf(2.0 * P2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct ThresholdParams {
    pub k: f64,
    pub l: f64,
    pub m: f64,
    pub rho: f64,
}

impl ThresholdParams {
    pub fn new(k: f64, l: f64, m: f64, rho: f64) -> Result<ThresholdParams> {
        let th = ThresholdParams { k, l, m, rho };
        th.validate()?;
        Ok(th)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("K", self.k), ("L", self.l), ("rho", self.rho)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(
                    name,
                    format!("must be a nonnegative number, got {v}"),
                ));
            }
        }
        if !(self.m.is_finite() && self.m >= 1.0) {
            return Err(invalid(
                "M",
                format!("M must be at least 1, got {}", self.m),
            ));
        }
        Ok(())
    }

    /// `(K+L)t + ρ + M(‖u0‖² + ‖u0‖^{2p₁} + 1)`.
    pub fn threshold(&self, t: f64, u0_l2: f64, p1: f64) -> f64 {
        (self.k + self.l) * t + self.rho + self.m * (u0_l2.powi(2) + u0_l2.powf(2.0 * p1) + 1.0)
    }
}

/// A stopping time observed on a finite horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StoppingTime {
    Hit {
        t: f64,
    },
    /// Not reached by `horizon`; the true value may be finite or `+∞`.
    Censored {
        horizon: f64,
    },
}

impl StoppingTime {
    pub fn time(&self) -> Option<f64> {
        match self {
            StoppingTime::Hit { t } => Some(*t),
            StoppingTime::Censored { .. } => None,
        }
    }

    pub fn is_hit(&self) -> bool {
        matches!(self, StoppingTime::Hit { .. })
    }

    /// Hit time, or `+∞` when censored.
    pub fn value_or_inf(&self) -> f64 {
        self.time().unwrap_or(f64::INFINITY)
    }

    pub fn min(self, other: StoppingTime) -> StoppingTime {
        match (self, other) {
            (StoppingTime::Hit { t: a }, StoppingTime::Hit { t: b }) => {
                StoppingTime::Hit { t: a.min(b) }
            }
            (h @ StoppingTime::Hit { .. }, _) | (_, h @ StoppingTime::Hit { .. }) => h,
            (StoppingTime::Censored { horizon: a }, StoppingTime::Censored { horizon: b }) => {
                StoppingTime::Censored { horizon: a.min(b) }
            }
        }
    }
}

/// First grid time with `E^ψ_u(t) ≥ (K+L)t + ρ + M(‖u(0)‖² + ‖u(0)‖^{2p₁} + 1)`.
pub fn stopping_time_tau(series: &FunctionalSeries, th: &ThresholdParams, p1: f64) -> StoppingTime {
    let u0 = series.l2.first().copied().unwrap_or(0.0);
    first_crossing(&series.times, &series.e_psi, |t| th.threshold(t, u0, p1))
}

pub(crate) fn first_crossing(
    times: &[f64],
    values: &[f64],
    threshold: impl Fn(f64) -> f64,
) -> StoppingTime {
    for (&t, &v) in times.iter().zip(values) {
        if v >= threshold(t) {
            return StoppingTime::Hit { t };
        }
    }
    StoppingTime::Censored {
        horizon: times.last().copied().unwrap_or(0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "p", rename_all = "snake_case")]
pub enum Functional {
    Energy,
    Moment(f64),
    PsiEnergy,
    PsiF,
}

/// `sup_t [X(t+T) - X(T) - Kt]` over the recorded horizon.
pub fn supermartingale_excess(
    series: &FunctionalSeries,
    which: Functional,
    k: f64,
    t_offset: f64,
) -> Result<f64> {
    supermartingale_excess_with(series, which, k, t_offset, 0.0, 0.0)
}

/// As [`supermartingale_excess`], with the additional offset
/// `c + m(‖u(T)‖² + ‖u(T)‖^{2p₁} + 1)` subtracted (zero `m` and `c` give the
/// plain excess).
pub fn supermartingale_excess_with(
    series: &FunctionalSeries,
    which: Functional,
    k: f64,
    t_offset: f64,
    c: f64,
    m: f64,
) -> Result<f64> {
    let x = series.series(which)?;
    let dt = series.dt();
    let start = if t_offset == 0.0 {
        0
    } else {
        let s = (t_offset / dt).round();
        if dt == 0.0
            || s < 0.0
            || s as usize >= x.len()
            || (s * dt - t_offset).abs() > 1e-9 * t_offset.max(dt)
        {
            return Err(invalid(
                "T_offset",
                format!("{t_offset} is not on the recorded grid"),
            ));
        }
        s as usize
    };
    let ut = series.l2[start];
    let offset = if m == 0.0 {
        c
    } else {
        c + m * (ut * ut + ut.powf(2.0 * P1) + 1.0)
    };
    let base = x[start];
    Ok(x[start..]
        .iter()
        .enumerate()
        .map(|(j, v)| v - base - k * j as f64 * dt - offset)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Residual of the Itô energy balance
/// `‖u(t)‖² - ‖u0‖² + 2∫(a‖u‖² + ‖u_xx‖²) - 2∫(h,u) - B₁t - M(t)` per step.
pub fn energy_residual(traj: &Trajectory, noise: &NoiseModel) -> Vec<f64> {
    let d = &traj.diagnostics;
    let q = &traj.quadratures;
    let b1 = noise.b1();
    let u0 = d.l2[0] * d.l2[0];
    (0..d.len())
        .map(|k| {
            d.l2[k] * d.l2[k] - u0 + 2.0 * (traj.a * q.l2_sq[k] + q.uxx_sq[k])
                - 2.0 * q.h_inner[k]
                - b1 * d.t[k]
                - d.martingale[k]
        })
        .collect()
}
