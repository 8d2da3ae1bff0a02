//! Ensembles, empirical measures, the dictionary lower bound on the
//! dual-Lipschitz distance, rate fits, tail tables and the recurrence
//! experiment.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate, Integrator, NoiseModel, SimParams};
use crate::error::{invalid, LabError, Result};
use crate::functionals::lyapunov_from_norms;
use crate::rng::{derive_seed, stream, StreamTag};
use crate::spectral::{
    random_smooth_field, real_coefficient, sobolev_norm_coeffs, sup_norm_constant, Complex, Field,
    Grid, WeightProfile,
};
use crate::stats::{
    linear_regression, pairwise_sum, par_map_indexed, quantile, wilson_interval, Z95,
};

/// Bumped whenever the standard dictionary changes.
pub const DICTIONARY_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    /// Coefficient on the `i`-th real basis function.
    Coefficient(usize),
    L2,
    H1,
    /// `‖φu‖ / max φ`.
    PhiL2,
    Probe(usize),
}

/// Ordered feature layout: `n_coeffs` real-basis coefficients, `‖u‖`, `‖u‖₁`,
/// `‖φu‖/φ_max`, then point values at the probe grid indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub half_length: f64,
    pub n_points: usize,
    pub n_coeffs: usize,
    pub probe_indices: Vec<usize>,
    /// Lipschitz constant of each feature with respect to `‖·‖₁`.
    pub lipschitz: Vec<f64>,
}

impl FeatureSchema {
    /// Probes are snapped to the nearest grid point.
    pub fn new(grid: &Grid, n_coeffs: usize, probes: &[f64]) -> Result<FeatureSchema> {
        let n = grid.n_points();
        if n_coeffs > n {
            return Err(invalid(
                "n_coeffs",
                format!("{n_coeffs} exceeds mode count {n}"),
            ));
        }
        let l = grid.half_length();
        let mut probe_indices = Vec::with_capacity(probes.len());
        for &x in probes {
            if !(x >= -l && x < l) {
                return Err(invalid("probes", format!("{x} is outside [-L, L)")));
            }
            probe_indices.push((((x + l) / grid.dx()).round() as usize) % n);
        }
        let mut lipschitz = vec![1.0; n_coeffs + 3];
        lipschitz.extend(std::iter::repeat_n(sup_norm_constant(grid), probes.len()));
        Ok(FeatureSchema {
            half_length: l,
            n_points: n,
            n_coeffs,
            probe_indices,
            lipschitz,
        })
    }

    pub fn len(&self) -> usize {
        self.lipschitz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lipschitz.is_empty()
    }

    pub fn index(&self, f: Feature) -> usize {
        match f {
            Feature::Coefficient(i) => {
                assert!(i < self.n_coeffs, "coefficient index out of range");
                i
            }
            Feature::L2 => self.n_coeffs,
            Feature::H1 => self.n_coeffs + 1,
            Feature::PhiL2 => self.n_coeffs + 2,
            Feature::Probe(i) => {
                assert!(i < self.probe_indices.len(), "probe index out of range");
                self.n_coeffs + 3 + i
            }
        }
    }

    fn matches(&self, grid: &Grid) -> bool {
        self.half_length == grid.half_length() && self.n_points == grid.n_points()
    }
}

pub fn features(u: &Field, schema: &FeatureSchema) -> Result<Vec<f64>> {
    let grid = u.grid();
    if !schema.matches(grid) {
        return Err(LabError::SchemaMismatch(
            "field grid differs from the feature schema".into(),
        ));
    }
    let coeffs = u.coefficients();
    let mut out = Vec::with_capacity(schema.len());
    for i in 0..schema.n_coeffs {
        out.push(real_coefficient(grid, coeffs, i));
    }
    out.push(u.l2_norm());
    out.push(u.sobolev_norm(1.0));
    let w = WeightProfile::new(grid);
    let phi_u: f64 = u
        .samples()
        .iter()
        .zip(w.phi_values())
        .map(|(v, p)| (v * p).powi(2))
        .sum::<f64>()
        * grid.dx();
    out.push(phi_u.sqrt() / w.phi_max());
    out.extend(schema.probe_indices.iter().map(|&j| u.samples()[j]));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalMeasure {
    pub schema: FeatureSchema,
    pub time: f64,
    pub members: Vec<Vec<f64>>,
}

impl EmpiricalMeasure {
    pub fn new(
        schema: FeatureSchema,
        time: f64,
        members: Vec<Vec<f64>>,
    ) -> Result<EmpiricalMeasure> {
        if members.is_empty() {
            return Err(LabError::InsufficientData(
                "empirical measure has no members".into(),
            ));
        }
        for m in &members {
            if m.len() != schema.len() {
                return Err(LabError::SchemaMismatch(format!(
                    "member has {} features, schema has {}",
                    m.len(),
                    schema.len()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(LabError::NonFinite { time });
            }
        }
        Ok(EmpiricalMeasure {
            schema,
            time,
            members,
        })
    }

    pub fn from_fields(
        schema: &FeatureSchema,
        time: f64,
        fields: &[Field],
    ) -> Result<EmpiricalMeasure> {
        let members = fields
            .iter()
            .map(|f| features(f, schema))
            .collect::<Result<Vec<_>>>()?;
        EmpiricalMeasure::new(schema.clone(), time, members)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn column(&self, f: Feature) -> Vec<f64> {
        let j = self.schema.index(f);
        self.members.iter().map(|m| m[j]).collect()
    }

    pub fn mean_of(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        let vals: Vec<f64> = self.members.iter().map(|m| f(m)).collect();
        pairwise_sum(&vals) / vals.len() as f64
    }

    /// `F(u) = 1 + ‖u‖₁² + ‖u‖^{2p₂}` per member.
    pub fn lyapunov_values(&self) -> Vec<f64> {
        let (l2, h1) = (
            self.schema.index(Feature::L2),
            self.schema.index(Feature::H1),
        );
        self.members
            .iter()
            .map(|m| lyapunov_from_norms(m[h1], m[l2]))
            .collect()
    }
}

/// A test functional with `‖f‖_∞ + Lip(f) ≤ 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DictElement {
    /// `clamp(slope (x_j − centre), −height, height)`.
    Affine {
        feature: usize,
        slope: f64,
        centre: f64,
        height: f64,
    },
    /// `height − min(rate |x_S − anchor|, 2 height)` on the coefficient block.
    Distance {
        anchor: Vec<f64>,
        rate: f64,
        height: f64,
    },
    /// `clamp(slope (x_i − x_j), −height, height)`.
    Difference {
        i: usize,
        j: usize,
        slope: f64,
        height: f64,
    },
}

impl DictElement {
    /// `(sup bound, Lipschitz bound)` with respect to `‖·‖₁` on states.
    pub fn certificate(&self, schema: &FeatureSchema) -> (f64, f64) {
        match self {
            DictElement::Affine {
                feature,
                slope,
                height,
                ..
            } => (*height, slope.abs() * schema.lipschitz[*feature]),
            // Low-mode coefficients are 1-Lipschitz jointly (Bessel).
            DictElement::Distance { rate, height, .. } => (*height, *rate),
            DictElement::Difference {
                i,
                j,
                slope,
                height,
            } => (
                *height,
                slope.abs() * (schema.lipschitz[*i] + schema.lipschitz[*j]),
            ),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            DictElement::Affine {
                feature,
                slope,
                centre,
                height,
            } => (slope * (x[*feature] - centre)).clamp(-height, *height),
            DictElement::Distance {
                anchor,
                rate,
                height,
            } => {
                let d2: f64 = anchor.iter().zip(x).map(|(a, v)| (v - a) * (v - a)).sum();
                height - (rate * d2.sqrt()).min(2.0 * height)
            }
            DictElement::Difference {
                i,
                j,
                slope,
                height,
            } => (slope * (x[*i] - x[*j])).clamp(-height, *height),
        }
    }

    fn check(&self, schema: &FeatureSchema) -> Result<()> {
        let bad_index = match self {
            DictElement::Affine { feature, .. } => *feature >= schema.len(),
            DictElement::Distance { anchor, .. } => anchor.len() != schema.n_coeffs,
            DictElement::Difference { i, j, .. } => *i >= schema.len() || *j >= schema.len(),
        };
        if bad_index {
            return Err(LabError::SchemaMismatch(
                "dictionary element does not fit the schema".into(),
            ));
        }
        let (sup, lip) = self.certificate(schema);
        if !(sup >= 0.0 && lip >= 0.0 && sup + lip <= 1.0 + 1e-12) {
            return Err(invalid(
                "dictionary",
                format!("element violates the budget: sup {sup} + Lip {lip} > 1"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzDictionary {
    pub version: u32,
    pub schema: FeatureSchema,
    elements: Vec<DictElement>,
}

impl LipschitzDictionary {
    pub fn empty(schema: &FeatureSchema) -> LipschitzDictionary {
        LipschitzDictionary {
            version: DICTIONARY_VERSION,
            schema: schema.clone(),
            elements: Vec::new(),
        }
    }

    /// Adds an element after checking its budget certificate.
    pub fn push(&mut self, e: DictElement) -> Result<()> {
        e.check(&self.schema)?;
        self.elements.push(e);
        Ok(())
    }

    pub fn elements(&self) -> &[DictElement] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// The standard dictionary: affine probes of every feature at three
    /// sup/Lipschitz splits around `centres`, clamped distances to each anchor
    /// on a geometric rate grid, and differences of neighbouring coefficients.
    pub fn standard(
        schema: &FeatureSchema,
        centres: &[f64],
        anchors: &[Vec<f64>],
    ) -> Result<LipschitzDictionary> {
        if centres.len() != schema.len() {
            return Err(LabError::SchemaMismatch(
                "one centre per feature required".into(),
            ));
        }
        let mut dict = LipschitzDictionary::empty(schema);
        for (j, &c) in centres.iter().enumerate() {
            for height in [0.25, 0.5, 0.75] {
                dict.push(DictElement::Affine {
                    feature: j,
                    slope: (1.0 - height) / schema.lipschitz[j],
                    centre: c,
                    height,
                })?;
            }
        }
        for a in anchors {
            for k in 0..16 {
                let rate = 0.95 * 0.6f64.powi(k);
                dict.push(DictElement::Distance {
                    anchor: a[..schema.n_coeffs].to_vec(),
                    rate,
                    height: 1.0 - rate,
                })?;
            }
        }
        for i in 1..schema.n_coeffs {
            let j = i - 1;
            dict.push(DictElement::Difference {
                i,
                j,
                slope: 0.5 / (schema.lipschitz[i] + schema.lipschitz[j]),
                height: 0.5,
            })?;
        }
        Ok(dict)
    }

    /// Standard dictionary centred on the pooled medians of two measures,
    /// with both feature means as anchors.
    pub fn for_pair(mu1: &EmpiricalMeasure, mu2: &EmpiricalMeasure) -> Result<LipschitzDictionary> {
        check_schemas(mu1, mu2)?;
        let n = mu1.schema.len();
        let mut centres = Vec::with_capacity(n);
        let mut a1 = Vec::with_capacity(n);
        let mut a2 = Vec::with_capacity(n);
        for j in 0..n {
            let c1: Vec<f64> = mu1.members.iter().map(|m| m[j]).collect();
            let c2: Vec<f64> = mu2.members.iter().map(|m| m[j]).collect();
            a1.push(pairwise_sum(&c1) / c1.len() as f64);
            a2.push(pairwise_sum(&c2) / c2.len() as f64);
            let pooled: Vec<f64> = c1.into_iter().chain(c2).collect();
            centres.push(quantile(&pooled, 0.5));
        }
        LipschitzDictionary::standard(&mu1.schema, &centres, &[a1, a2])
    }
}

fn check_schemas(mu1: &EmpiricalMeasure, mu2: &EmpiricalMeasure) -> Result<()> {
    if mu1.schema != mu2.schema {
        return Err(LabError::SchemaMismatch(
            "measures use different feature schemas".into(),
        ));
    }
    Ok(())
}

/// `max_f |⟨f, μ₁⟩ − ⟨f, μ₂⟩|` over the dictionary: a lower bound on the
/// dual-Lipschitz distance.
pub fn dual_lipschitz_distance(
    mu1: &EmpiricalMeasure,
    mu2: &EmpiricalMeasure,
    dict: &LipschitzDictionary,
) -> Result<f64> {
    check_schemas(mu1, mu2)?;
    if dict.schema != mu1.schema {
        return Err(LabError::SchemaMismatch(
            "dictionary built for another schema".into(),
        ));
    }
    let gaps = par_map_indexed(dict.elements.len(), |i| {
        let f = &dict.elements[i];
        (mu1.mean_of(|x| f.eval(x)) - mu2.mean_of(|x| f.eval(x))).abs()
    });
    Ok(gaps.into_iter().fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemberFailure {
    pub index: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleRun {
    pub requested: usize,
    pub measures: Vec<EmpiricalMeasure>,
    pub failures: Vec<MemberFailure>,
}

impl EnsembleRun {
    pub fn times(&self) -> Vec<f64> {
        self.measures.iter().map(|m| m.time).collect()
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Simulates `members` trajectories, member `i` starting from `init(i)` with
/// its own forcing stream, and returns the empirical measure of the features
/// at each record time. Members that fail are reported and left out.
pub fn run_ensemble<F>(
    members: usize,
    init: F,
    noise: &NoiseModel,
    master_seed: u64,
    params: &SimParams,
    record_times: &[f64],
    schema: &FeatureSchema,
) -> Result<EnsembleRun>
where
    F: Fn(usize) -> Field + Sync + Send,
{
    if members < 2 {
        return Err(invalid("members", "an ensemble needs at least two members"));
    }
    if record_times.is_empty() {
        return Err(invalid("record_times", "no record times given"));
    }
    if !schema.matches(&params.grid) {
        return Err(LabError::SchemaMismatch(
            "schema grid differs from params grid".into(),
        ));
    }
    params.validate()?;
    let steps = params.steps();
    let mut ks = Vec::with_capacity(record_times.len());
    for &t in record_times {
        let k = (t / params.dt).round();
        if !(k >= 0.0
            && k <= steps as f64
            && (k * params.dt - t).abs() <= 1e-9 * t.abs().max(params.dt))
        {
            return Err(invalid(
                "record_times",
                format!("{t} is not on the step grid"),
            ));
        }
        ks.push(k as usize);
    }
    let stride = ks.iter().fold(0, |g, &k| gcd(g, k));
    let mut p = params.clone();
    p.record_every = if stride == 0 { steps.max(1) } else { stride };
    p.record_noise = false;
    p.weighted_diagnostics = false;

    let rows: Vec<std::result::Result<Vec<Vec<f64>>, String>> = par_map_indexed(members, |i| {
        let member_noise = noise.with_seed(derive_seed(master_seed, StreamTag::Forcing, i as u64));
        let traj = simulate(&init(i), &member_noise, &p).map_err(|e| e.to_string())?;
        ks.iter()
            .map(|&k| {
                let u = traj
                    .state_at_step(k)
                    .expect("record stride divides every record step");
                features(u, schema).map_err(|e| e.to_string())
            })
            .collect()
    });
    let mut failures = Vec::new();
    let mut per_time: Vec<Vec<Vec<f64>>> = vec![Vec::new(); ks.len()];
    for (i, row) in rows.into_iter().enumerate() {
        match row {
            Ok(fs) => {
                for (slot, f) in per_time.iter_mut().zip(fs) {
                    slot.push(f);
                }
            }
            Err(error) => failures.push(MemberFailure { index: i, error }),
        }
    }
    if members - failures.len() < 2 {
        return Err(LabError::InsufficientData(format!(
            "{} of {members} ensemble members failed",
            failures.len()
        )));
    }
    let measures = per_time
        .into_iter()
        .zip(record_times)
        .map(|(m, &t)| EmpiricalMeasure::new(schema.clone(), t, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleRun {
        requested: members,
        measures,
        failures,
    })
}

/// Quality threshold below which a power-law fit is flagged.
pub const POOR_FIT_R2: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    pub c_hat: f64,
    pub p_hat: f64,
    pub r_squared: f64,
    /// R² of `ln d` against `t` on the same points.
    pub exp_r_squared: f64,
    pub points: usize,
    /// Window points dropped because the distance was not positive.
    pub excluded: usize,
    pub poor_fit: bool,
}

/// Least squares of `ln d` on `ln(t+1)` over the window.
pub fn fit_polynomial_rate(series: &[(f64, f64)], window: (f64, f64)) -> Result<RateFit> {
    let in_window: Vec<(f64, f64)> = series
        .iter()
        .copied()
        .filter(|(t, _)| *t >= window.0 && *t <= window.1)
        .collect();
    let positive: Vec<(f64, f64)> = in_window
        .iter()
        .copied()
        .filter(|(_, d)| *d > 0.0)
        .collect();
    let excluded = in_window.len() - positive.len();
    if positive.len() < 8 {
        return Err(LabError::InsufficientData(format!(
            "{} positive points in the fit window, need 8 ({excluded} excluded)",
            positive.len()
        )));
    }
    let ys: Vec<f64> = positive.iter().map(|(_, d)| d.ln()).collect();
    let xs: Vec<f64> = positive.iter().map(|(t, _)| (t + 1.0).ln()).collect();
    let ts: Vec<f64> = positive.iter().map(|(t, _)| *t).collect();
    let fit = linear_regression(&xs, &ys)
        .ok_or_else(|| LabError::InsufficientData("fit window has a single time".into()))?;
    let exp_fit = linear_regression(&ts, &ys).expect("same abscissae spread");
    Ok(RateFit {
        c_hat: fit.intercept.exp(),
        p_hat: 0.0 - fit.slope,
        r_squared: fit.r_squared,
        exp_r_squared: exp_fit.r_squared,
        points: positive.len(),
        excluded,
        poor_fit: fit.r_squared < POOR_FIT_R2 || exp_fit.r_squared > fit.r_squared,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailSample {
    pub value: f64,
    /// The true value is known only to be at least `value`.
    pub censored: bool,
}

impl TailSample {
    pub fn exact(value: f64) -> TailSample {
        TailSample {
            value,
            censored: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailRow {
    pub rho: f64,
    pub p_hat: f64,
    pub stderr: f64,
    pub ci: (f64, f64),
    pub exceed: usize,
    /// Censored samples below `rho`, whose exceedance is unknown.
    pub censored_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailTable {
    pub samples: usize,
    pub censored: usize,
    pub rows: Vec<TailRow>,
}

/// Censoring-aware estimates of `P(X ≥ ρ)`.
pub fn tail_probability(samples: &[TailSample], thresholds: &[f64]) -> Result<TailTable> {
    let censored = samples.iter().filter(|s| s.censored).count();
    if !samples.is_empty() && censored == samples.len() {
        return Err(LabError::InsufficientData(
            "every sample is censored".into(),
        ));
    }
    if samples.len() - censored < 32 {
        return Err(LabError::InsufficientData(format!(
            "{} uncensored samples, need 32",
            samples.len() - censored
        )));
    }
    let rows = thresholds
        .iter()
        .map(|&rho| {
            let exceed = samples.iter().filter(|s| s.value >= rho).count();
            let unknown = samples
                .iter()
                .filter(|s| s.censored && s.value < rho)
                .count();
            let at_risk = samples.len() - unknown;
            let p = exceed as f64 / at_risk as f64;
            TailRow {
                rho,
                p_hat: p,
                stderr: (p * (1.0 - p) / at_risk as f64).sqrt(),
                ci: wilson_interval(exceed, at_risk, Z95),
                exceed,
                censored_count: unknown,
            }
        })
        .collect();
    Ok(TailTable {
        samples: samples.len(),
        censored,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailModel {
    /// `ln P` linear in `ρ`.
    Exponential,
    /// `ln P` linear in `ln ρ`.
    Polynomial,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailFit {
    pub model: TailModel,
    /// Decay rate (exponential) or exponent (polynomial), positive for
    /// decaying tails.
    pub slope: f64,
    pub r_squared: f64,
    /// Bootstrap 95% percentile interval for `slope`.
    pub ci: (f64, f64),
    pub thresholds: Vec<f64>,
}

/// Evenly spaced thresholds from the median of the uncensored values up to
/// the level still exceeded by `min_count` samples.
pub fn tail_thresholds(
    samples: &[TailSample],
    points: usize,
    min_count: usize,
) -> Result<Vec<f64>> {
    let mut vals: Vec<f64> = samples
        .iter()
        .filter(|s| !s.censored)
        .map(|s| s.value)
        .collect();
    if vals.len() < 32 {
        return Err(LabError::InsufficientData(format!(
            "{} uncensored samples, need 32",
            vals.len()
        )));
    }
    vals.sort_by(|a, b| a.total_cmp(b));
    let lo = quantile(&vals, 0.5);
    let hi = vals[vals.len().saturating_sub(min_count.max(1))];
    if !(hi > lo) || points < 2 {
        return Err(LabError::InsufficientData(
            "tail range is degenerate".into(),
        ));
    }
    Ok((0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect())
}

fn tail_slope(samples: &[TailSample], thresholds: &[f64], model: TailModel) -> Option<(f64, f64)> {
    let table = tail_probability(samples, thresholds).ok()?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = table
        .rows
        .iter()
        .filter(|r| r.p_hat > 0.0 && (model == TailModel::Exponential || r.rho > 0.0))
        .map(|r| {
            let x = match model {
                TailModel::Exponential => r.rho,
                TailModel::Polynomial => r.rho.ln(),
            };
            (x, r.p_hat.ln())
        })
        .unzip();
    let fit = linear_regression(&xs, &ys)?;
    Some((0.0 - fit.slope, fit.r_squared))
}

/// Regression of the log tail on the chosen scale, with a bootstrap interval.
pub fn fit_tail(
    samples: &[TailSample],
    thresholds: &[f64],
    model: TailModel,
    resamples: usize,
    seed: u64,
) -> Result<TailFit> {
    let (slope, r_squared) = tail_slope(samples, thresholds, model)
        .ok_or_else(|| LabError::InsufficientData("too few positive tail points".into()))?;
    let mut boot: Vec<f64> = par_map_indexed(resamples, |b| {
        let mut rng = stream(seed, StreamTag::Bootstrap, b as u64);
        let draw: Vec<TailSample> = (0..samples.len())
            .map(|_| samples[rng.random_range(0..samples.len())])
            .collect();
        tail_slope(&draw, thresholds, model).map(|(s, _)| s)
    })
    .into_iter()
    .flatten()
    .collect();
    let ci = if boot.len() < 2 {
        (f64::NEG_INFINITY, f64::INFINITY)
    } else {
        boot.sort_by(|a, b| a.total_cmp(b));
        (quantile(&boot, 0.025), quantile(&boot, 0.975))
    };
    Ok(TailFit {
        model,
        slope,
        r_squared,
        ci,
        thresholds: thresholds.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecurrenceConfig {
    /// Radius of the sphere the initial data are drawn from (in `‖·‖₁`).
    pub r: f64,
    /// Radius of the target ball.
    pub d: f64,
    pub t: f64,
    pub delta: f64,
    pub members: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecurrenceReport {
    #[serde(rename = "R")]
    pub r: f64,
    pub d: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub delta: f64,
    pub members: usize,
    pub hits: usize,
    pub in_gamma: usize,
    #[serde(rename = "P_hit")]
    pub p_hit: f64,
    pub p_hit_ci: (f64, f64),
    #[serde(rename = "P_Gamma")]
    pub p_gamma: f64,
    pub p_gamma_ci: (f64, f64),
    /// Seeds with `sup ‖th + W(t)‖₃ ≤ δ` whose `u(T)` missed the ball.
    pub implication_violations: usize,
    /// Members that blew up; counted as misses.
    pub failures: usize,
}

/// Probability that `u(T)` lies in the `‖·‖₁`-ball of radius `d` when `u0` is
/// drawn on the sphere of radius `R`, together with the frequency of the
/// event `Γ_δ = {sup_{t≤T} ‖th + W(t)‖₃ ≤ δ}` evaluated on the same noise.
pub fn recurrence_experiment(
    cfg: &RecurrenceConfig,
    noise: &NoiseModel,
    params: &SimParams,
    master_seed: u64,
) -> Result<RecurrenceReport> {
    if !(cfg.d > 0.0 && cfg.d < cfg.r) {
        return Err(invalid("d", "need 0 < d < R"));
    }
    if !(cfg.delta >= 0.0) {
        return Err(invalid("delta", "must be nonnegative"));
    }
    if cfg.members == 0 {
        return Err(invalid("members", "need at least one member"));
    }
    let mut p = params.with_horizon(cfg.t)?;
    p.record_every = p.steps().max(1);
    p.record_noise = true;
    p.weighted_diagnostics = false;
    let grid = p.grid.clone();
    let h_hat: Vec<Complex> = noise.forcing().coefficients().to_vec();

    let outcomes: Vec<(bool, bool, bool)> = par_map_indexed(cfg.members, |i| {
        let i = i as u64;
        let mut init = stream(master_seed, StreamTag::InitialData, i);
        let u0 = random_smooth_field(&grid, cfg.r, &mut init);
        let member_noise = noise.with_seed(derive_seed(master_seed, StreamTag::Forcing, i));
        let traj = match simulate(&u0, &member_noise, &p) {
            Ok(t) => t,
            Err(_) => return (false, false, true),
        };
        let hit = traj.final_state().sobolev_norm(1.0) <= cfg.d;
        let integ = Integrator::new(&p, &member_noise).expect("validated by simulate");
        let zero = Complex::new(0.0, 0.0);
        let mut w = vec![zero; grid.n_points()];
        let mut dw = vec![zero; grid.n_points()];
        let mut y = vec![zero; grid.n_points()];
        let mut in_gamma = true;
        if let Some(log) = traj.noise_log.as_ref() {
            for k in 1..=log.steps() {
                integ.noise_hat(log.row(k - 1), &mut dw);
                let t = k as f64 * p.dt;
                for j in 0..w.len() {
                    w[j] += dw[j];
                    y[j] = h_hat[j] * t + w[j];
                }
                if sobolev_norm_coeffs(&grid, &y, 3.0) > cfg.delta {
                    in_gamma = false;
                    break;
                }
            }
        } else {
            for k in 1..=p.steps() {
                let t = k as f64 * p.dt;
                let y: Vec<Complex> = h_hat.iter().map(|c| c * t).collect();
                if sobolev_norm_coeffs(&grid, &y, 3.0) > cfg.delta {
                    in_gamma = false;
                    break;
                }
            }
        }
        (hit, in_gamma, false)
    });
    let m = cfg.members;
    let hits = outcomes.iter().filter(|o| o.0).count();
    let in_gamma = outcomes.iter().filter(|o| o.1).count();
    Ok(RecurrenceReport {
        r: cfg.r,
        d: cfg.d,
        t: cfg.t,
        delta: cfg.delta,
        members: m,
        hits,
        in_gamma,
        p_hit: hits as f64 / m as f64,
        p_hit_ci: wilson_interval(hits, m, Z95),
        p_gamma: in_gamma as f64 / m as f64,
        p_gamma_ci: wilson_interval(in_gamma, m, Z95),
        implication_violations: outcomes.iter().filter(|o| o.1 && !o.0).count(),
        failures: outcomes.iter().filter(|o| o.2).count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LyapunovDrift {
    /// `F(u0)`.
    pub f0: f64,
    /// Ensemble mean of `F(u(t*))` and its standard error.
    pub mean: f64,
    pub stderr: f64,
    /// `mean / F(u0)` and its 3-sigma upper bound.
    pub ratio: f64,
    pub ratio_upper: f64,
}

pub fn lyapunov_drift(measure: &EmpiricalMeasure, f0: f64) -> LyapunovDrift {
    let vals = measure.lyapunov_values();
    let mean = crate::stats::mean(&vals);
    let stderr = crate::stats::std_err(&vals);
    LyapunovDrift {
        f0,
        mean,
        stderr,
        ratio: mean / f0,
        ratio_upper: (mean + 3.0 * stderr) / f0,
    }
}
