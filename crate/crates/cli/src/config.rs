//! Run configuration: a strict TOML schema. Physical parameters (`a`, `dt`,
//! `L`, `n`, and `N` for coupled runs) have no defaults.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use kse_core::criterion::{ArToy, GeometricToy, HypothesisConstants};
use kse_core::dynamics::{default_forcing, NoiseModel, SimParams};
use kse_core::functionals::ThresholdParams;
use kse_core::io::read_field;
use kse_core::rng::{stream, StreamTag};
use kse_core::spectral::{basis_function, random_smooth_field, Grid};
use kse_core::{make_grid, Field, LabError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Simulate,
    Couple,
    EnsembleMix,
    Squeeze,
    Recurrence,
    Criterion,
    VerifyAll,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Simulate => "simulate",
            Experiment::Couple => "couple",
            Experiment::EnsembleMix => "ensemble-mix",
            Experiment::Squeeze => "squeeze",
            Experiment::Recurrence => "recurrence",
            Experiment::Criterion => "criterion",
            Experiment::VerifyAll => "verify-all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub seed: Option<u64>,
    pub grid: Option<GridSection>,
    pub dynamics: Option<DynamicsSection>,
    pub noise: Option<NoiseSection>,
    pub initial: Option<InitialSection>,
    pub coupling: Option<CouplingSection>,
    pub squeeze: Option<SqueezeSection>,
    pub mixing: Option<MixingSection>,
    pub recurrence: Option<RecurrenceSection>,
    pub criterion: Option<CriterionSection>,
    pub verify: Option<VerifySection>,
}

/// Domain `[-L, L)` with `n` points. Give `L` directly or as `L_over_pi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(rename = "L")]
    pub l: Option<f64>,
    #[serde(rename = "L_over_pi")]
    pub l_over_pi: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSection {
    pub a: f64,
    pub dt: f64,
    pub t_end: f64,
    pub record_every: Option<usize>,
    pub blowup_guard: Option<f64>,
    pub dealias: Option<bool>,
}

/// Either `modes` equal coefficients of size `amplitude`, or an explicit
/// `coefficients` list over the real basis. `forcing` is the amplitude of the
/// deterministic bump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub modes: Option<usize>,
    pub amplitude: Option<f64>,
    pub coefficients: Option<Vec<f64>>,
    pub forcing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum InitialSection {
    Zero,
    /// Seeded localized field with the given `‖·‖₁`.
    Random {
        radius: f64,
    },
    /// `amplitude` times the real basis element `index`.
    Mode {
        index: usize,
        amplitude: f64,
    },
    /// A binary field file; relative paths resolve against the config.
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSection {
    #[serde(rename = "K")]
    pub k: f64,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "M")]
    pub m: f64,
    pub rho: f64,
}

impl ThresholdSection {
    pub fn params(&self) -> Result<ThresholdParams> {
        ThresholdParams::new(self.k, self.l, self.m, self.rho)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSection {
    #[serde(rename = "N")]
    pub n_modes: usize,
    pub threshold: ThresholdSection,
    /// `‖·‖₁` distance of the perturbed start `u′₀` from `u₀`.
    pub perturbation: f64,
    pub fp_eps: Option<f64>,
    pub fp_burn_in: Option<f64>,
    pub fp_c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SqueezeSection {
    #[serde(rename = "N")]
    pub n_modes: usize,
    pub threshold: ThresholdSection,
    pub t_window: f64,
    pub d: f64,
    pub pairs: usize,
    pub moment_p: f64,
    pub distance_c: Option<f64>,
    pub distance_p: Option<f64>,
}

/// Two ensembles driven by the same noise streams, from the configured
/// initial data and from a second one of radius `second_radius`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixingSection {
    pub members: usize,
    pub second_radius: f64,
    pub record_times: Vec<f64>,
    pub n_coeffs: usize,
    pub probes: Vec<f64>,
    pub window: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecurrenceSection {
    #[serde(rename = "R")]
    pub r: f64,
    pub d: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub delta: f64,
    pub members: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ToySection {
    Geometric {
        success: f64,
        t0: usize,
        s0: usize,
    },
    Ar {
        lambda: f64,
        kappa: f64,
        alpha: f64,
        noise: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriterionSection {
    pub toy: ToySection,
    pub delta1: f64,
    pub p: f64,
    pub q: f64,
    pub c: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub ladders: usize,
    pub p0: f64,
    pub horizon: usize,
    pub k_max: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteSize {
    Quick,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    pub sizes: SuiteSize,
}

pub enum Toy {
    Geometric(GeometricToy),
    Ar(ArToy),
}

/// Everything an experiment needs, checked up front.
pub struct Resolved {
    pub grid: Arc<Grid>,
    pub params: SimParams,
    pub noise: NoiseModel,
    pub u0: Field,
}

fn missing(section: &str, experiment: Experiment) -> LabError {
    LabError::InvalidParameter {
        name: "config",
        reason: format!(
            "section [{section}] is required for `{}`",
            experiment.name()
        ),
    }
}

fn bad(name: &'static str, reason: impl Into<String>) -> LabError {
    LabError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(bad(name, format!("must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| LabError::Format(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    pub fn grid(&self) -> Result<Arc<Grid>> {
        let g = self
            .grid
            .as_ref()
            .ok_or_else(|| missing("grid", self.experiment))?;
        let l = match (g.l, g.l_over_pi) {
            (Some(l), None) => l,
            (None, Some(m)) => m * PI,
            (Some(_), Some(_)) => return Err(bad("L", "give `L` or `L_over_pi`, not both")),
            (None, None) => return Err(bad("L", "the half length must be given")),
        };
        make_grid(l, g.n)
    }

    pub fn params(&self, grid: &Arc<Grid>) -> Result<SimParams> {
        let d = self
            .dynamics
            .as_ref()
            .ok_or_else(|| missing("dynamics", self.experiment))?;
        let mut p = SimParams::new(grid, d.a, d.dt, d.t_end)?;
        if let Some(r) = d.record_every {
            p.record_every = r;
        }
        if let Some(g) = d.blowup_guard {
            p.blowup_guard = g;
        }
        if let Some(on) = d.dealias {
            p.dealias = on;
        }
        p.validate()?;
        Ok(p)
    }

    pub fn noise(&self, grid: &Arc<Grid>, seed: u64) -> Result<NoiseModel> {
        let s = self
            .noise
            .as_ref()
            .ok_or_else(|| missing("noise", self.experiment))?;
        if !s.forcing.is_finite() {
            return Err(bad("forcing", "must be finite"));
        }
        let h = default_forcing(grid, s.forcing)?;
        match (&s.coefficients, s.modes, s.amplitude) {
            (Some(c), None, None) => NoiseModel::new(c.clone(), h, seed),
            (None, Some(m), Some(b)) => NoiseModel::uniform(m, b, h, seed),
            _ => Err(bad(
                "noise",
                "give either `coefficients` or both `modes` and `amplitude`",
            )),
        }
    }

    pub fn initial(&self, grid: &Arc<Grid>, seed: u64, base: &Path) -> Result<Field> {
        let init = self
            .initial
            .as_ref()
            .ok_or_else(|| missing("initial", self.experiment))?;
        match init {
            InitialSection::Zero => Ok(Field::zeros(grid)),
            InitialSection::Random { radius } => {
                if !(radius.is_finite() && *radius >= 0.0) {
                    return Err(bad("radius", "must be nonnegative"));
                }
                let mut rng = stream(seed, StreamTag::InitialData, 0);
                Ok(random_smooth_field(grid, *radius, &mut rng))
            }
            InitialSection::Mode { index, amplitude } => {
                if !amplitude.is_finite() {
                    return Err(bad("amplitude", "must be finite"));
                }
                Ok(basis_function(grid, *index)?.scale(*amplitude))
            }
            InitialSection::File { path } => {
                let f = read_field(&base.join(path))?;
                if !f.grid().same_as(grid) {
                    return Err(LabError::GridMismatch);
                }
                Ok(f)
            }
        }
    }

    /// Grid, parameters, noise and initial data for the field experiments.
    pub fn resolve(&self, seed: u64, base: &Path) -> Result<Resolved> {
        let grid = self.grid()?;
        let params = self.params(&grid)?;
        let noise = self.noise(&grid, seed)?;
        let u0 = self.initial(&grid, seed, base)?;
        Ok(Resolved {
            grid,
            params,
            noise,
            u0,
        })
    }

    pub fn coupling(&self) -> Result<&CouplingSection> {
        let c = self
            .coupling
            .as_ref()
            .ok_or_else(|| missing("coupling", self.experiment))?;
        c.threshold.params()?;
        if c.n_modes == 0 {
            return Err(bad("N", "need at least one projected mode"));
        }
        if !(c.perturbation.is_finite() && c.perturbation >= 0.0) {
            return Err(bad("perturbation", "must be nonnegative"));
        }
        if let Some(e) = c.fp_eps {
            positive("fp_eps", e)?;
        }
        if let Some(b) = c.fp_burn_in {
            if !(b.is_finite() && b >= 0.0) {
                return Err(bad("fp_burn_in", "must be nonnegative"));
            }
        }
        if let Some(c) = c.fp_c {
            positive("fp_c", c)?;
        }
        Ok(c)
    }

    pub fn squeeze(&self) -> Result<&SqueezeSection> {
        let s = self
            .squeeze
            .as_ref()
            .ok_or_else(|| missing("squeeze", self.experiment))?;
        s.threshold.params()?;
        if s.n_modes == 0 {
            return Err(bad("N", "need at least one projected mode"));
        }
        positive("t_window", s.t_window)?;
        positive("d", s.d)?;
        positive("moment_p", s.moment_p)?;
        if s.pairs == 0 {
            return Err(bad("pairs", "need at least one pair"));
        }
        if s.distance_c.is_some() != s.distance_p.is_some() {
            return Err(bad(
                "distance_c",
                "`distance_c` and `distance_p` go together",
            ));
        }
        Ok(s)
    }

    pub fn mixing(&self) -> Result<&MixingSection> {
        let m = self
            .mixing
            .as_ref()
            .ok_or_else(|| missing("mixing", self.experiment))?;
        if m.members < 2 {
            return Err(bad("members", "an ensemble needs at least two members"));
        }
        if !(m.second_radius.is_finite() && m.second_radius >= 0.0) {
            return Err(bad("second_radius", "must be nonnegative"));
        }
        if m.record_times.is_empty() {
            return Err(bad("record_times", "no record times given"));
        }
        if m.record_times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(bad("record_times", "must be strictly increasing"));
        }
        if !(m.window[0] <= m.window[1]) {
            return Err(bad("window", "start must not exceed end"));
        }
        Ok(m)
    }

    pub fn recurrence(&self) -> Result<&RecurrenceSection> {
        let r = self
            .recurrence
            .as_ref()
            .ok_or_else(|| missing("recurrence", self.experiment))?;
        if !(r.d > 0.0 && r.d < r.r) {
            return Err(bad("d", "need 0 < d < R"));
        }
        positive("T", r.t)?;
        positive("delta", r.delta)?;
        if r.members == 0 {
            return Err(bad("members", "need at least one member"));
        }
        Ok(r)
    }

    pub fn criterion(&self) -> Result<(&CriterionSection, Toy, HypothesisConstants)> {
        let c = self
            .criterion
            .as_ref()
            .ok_or_else(|| missing("criterion", self.experiment))?;
        let toy = match c.toy {
            ToySection::Geometric { success, t0, s0 } => {
                Toy::Geometric(GeometricToy::new(success, t0, s0)?)
            }
            ToySection::Ar {
                lambda,
                kappa,
                alpha,
                noise,
            } => Toy::Ar(ArToy::new(lambda, kappa, alpha, noise)?),
        };
        let constants = HypothesisConstants {
            delta1: c.delta1,
            p: c.p,
            q: c.q,
            c: c.c,
            k: c.k,
        };
        constants.validate()?;
        if c.ladders == 0 {
            return Err(bad("ladders", "need at least one ladder"));
        }
        positive("p0", c.p0)?;
        if c.horizon == 0 {
            return Err(bad("horizon", "must be positive"));
        }
        Ok((c, toy, constants))
    }

    pub fn verify(&self) -> Result<SuiteSize> {
        self.verify
            .as_ref()
            .map(|v| v.sizes)
            .ok_or_else(|| missing("verify", self.experiment))
    }

    /// Checks every section the experiment reads.
    pub fn validate(&self, seed: u64, base: &Path) -> Result<()> {
        match self.experiment {
            Experiment::Simulate => self.resolve(seed, base).map(|_| ()),
            Experiment::Couple => {
                let r = self.resolve(seed, base)?;
                let c = self.coupling()?;
                if c.n_modes > r.grid.n_points() {
                    return Err(bad("N", "exceeds the grid mode count"));
                }
                Ok(())
            }
            Experiment::Squeeze => {
                let r = self.resolve(seed, base)?;
                let s = self.squeeze()?;
                if s.n_modes > r.grid.n_points() {
                    return Err(bad("N", "exceeds the grid mode count"));
                }
                Ok(())
            }
            Experiment::EnsembleMix => {
                self.resolve(seed, base)?;
                self.mixing().map(|_| ())
            }
            Experiment::Recurrence => {
                self.resolve(seed, base)?;
                self.recurrence().map(|_| ())
            }
            Experiment::Criterion => self.criterion().map(|_| ()),
            Experiment::VerifyAll => self.verify().map(|_| ()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SIMULATE: &str = r#"
experiment = "simulate"
seed = 3

[grid]
L_over_pi = 8
n = 64

[dynamics]
a = 1.0
dt = 0.01
t_end = 1.0

[noise]
modes = 0
amplitude = 0.0
forcing = 0.0

[initial]
kind = "random"
radius = 2.0
"#;

    #[test]
    fn parses_and_resolves() {
        let c = RunConfig::parse(SIMULATE).unwrap();
        assert_eq!(c.experiment, Experiment::Simulate);
        let r = c.resolve(3, Path::new(".")).unwrap();
        assert_eq!(r.grid.n_points(), 64);
        assert!((r.grid.half_length() - 8.0 * PI).abs() < 1e-12);
        assert!((r.u0.sobolev_norm(1.0) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = SIMULATE.replace("t_end = 1.0", "t_end = 1.0\nviscosity = 2.0");
        assert!(matches!(RunConfig::parse(&text), Err(LabError::Format(_))));
        let text = SIMULATE.replace("radius = 2.0", "radius = 2.0\nwidth = 1.0");
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn physical_parameters_have_no_defaults() {
        let text = SIMULATE.replace("dt = 0.01\n", "");
        assert!(RunConfig::parse(&text).is_err());
        let text = SIMULATE.replace("L_over_pi = 8\n", "");
        let c = RunConfig::parse(&text).unwrap();
        assert!(c.grid().is_err());
    }

    #[test]
    fn negative_dt_fails_validation() {
        let text = SIMULATE.replace("dt = 0.01", "dt = -0.01");
        let c = RunConfig::parse(&text).unwrap();
        assert!(matches!(
            c.validate(3, Path::new(".")),
            Err(LabError::InvalidParameter { name: "dt", .. })
        ));
    }

    #[test]
    fn noise_needs_one_form() {
        let text = SIMULATE.replace("modes = 0\n", "coefficients = [1.0]\n");
        let c = RunConfig::parse(&text).unwrap();
        assert!(c.validate(3, Path::new(".")).is_err());
    }

    #[test]
    fn coupled_runs_require_n() {
        let text = SIMULATE.replace("\"simulate\"", "\"couple\"");
        let c = RunConfig::parse(&text).unwrap();
        assert!(c.validate(3, Path::new(".")).is_err());
    }
}
