//! The abstract coupling criterion on toy Markov pairs: the `ρ_k` ladder of
//! attempts, and Monte-Carlo checks of its geometric and moment bounds.
//!
//! Time is discrete (unit steps). An attempt starts whenever the pair is in
//! `B`; it fails at the first lag `t` with `‖u − u′‖ ≥ C(t+1)^{-p}` and
//! succeeds for good once the toy reports the pair as settled.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Pareto};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{stream, StreamTag};
use crate::stats::{mean, par_map_indexed, std_err, wilson_interval, Z95};

/// Constants of the coupling hypothesis. `δ₂` is not modelled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypothesisConstants {
    pub delta1: f64,
    pub p: f64,
    pub q: f64,
    pub c: f64,
    pub k: f64,
}

impl HypothesisConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta1 > 0.0 && self.delta1 <= 1.0) {
            return Err(invalid("delta1", "must lie in (0, 1]"));
        }
        if !(self.q >= 1.0) {
            return Err(invalid("q", "must be at least 1"));
        }
        if self.q > self.p {
            return Err(invalid(
                "q",
                format!("q = {} exceeds p = {}", self.q, self.p),
            ));
        }
        if !(self.c > 0.0 && self.k > 0.0) {
            return Err(invalid("c", "c and K must be positive"));
        }
        Ok(())
    }
}

pub trait AbstractCoupling: Sync {
    type Pair: Clone + Send;

    /// Squeeze monitor `C(t+1)^{-p}`: returns `(C, p)`.
    fn monitor(&self) -> (f64, f64);
    /// Pair started from a state of size about `level`.
    fn initial_pair(&self, level: f64) -> Self::Pair;
    /// The increasing weight `g ≥ 1` evaluated at the pair.
    fn g(&self, pair: &Self::Pair) -> f64;
    fn in_b(&self, pair: &Self::Pair) -> bool;
    fn distance(&self, pair: &Self::Pair) -> f64;
    /// Called when an attempt starts from `B`.
    fn begin_attempt(&self, pair: &mut Self::Pair, rng: &mut ChaCha8Rng);
    fn step(&self, pair: &mut Self::Pair, rng: &mut ChaCha8Rng);
    /// True once the pair is known to squeeze forever.
    fn settled(&self, pair: &Self::Pair) -> bool;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderRecord {
    /// `ρ_0, ρ_1, …` (all finite), `ρ_0 = τ_B`.
    pub rho: Vec<usize>,
    /// Failure lag `σ` of each failed attempt.
    pub sigma: Vec<usize>,
    /// `τ_B ∘ θ_σ` after each failure.
    pub returns: Vec<usize>,
    /// Index of the successful attempt.
    pub k_bar: Option<usize>,
    /// `ℓ = ρ_{k̄}`.
    pub ell: Option<usize>,
    /// The horizon cut the ladder before it resolved.
    pub censored: bool,
    /// `max_{t≥ℓ} ‖u_t − u′_t‖ (t−ℓ+1)^p / C` along the final attempt.
    pub post_ell_ratio: f64,
}

impl LadderRecord {
    pub fn tau_b(&self) -> Option<usize> {
        self.rho.first().copied()
    }

    /// `ρ = σ + τ_B∘θ_σ` for each failed attempt.
    pub fn attempt_lengths(&self) -> Vec<usize> {
        self.sigma
            .iter()
            .zip(&self.returns)
            .map(|(s, r)| s + r)
            .collect()
    }
}

pub fn simulate_ladder<C: AbstractCoupling>(
    coupling: &C,
    init: C::Pair,
    rng: &mut ChaCha8Rng,
    horizon: usize,
) -> LadderRecord {
    let (c, p) = coupling.monitor();
    let mut pair = init;
    let mut t = 0usize;
    let mut rec = LadderRecord {
        rho: Vec::new(),
        sigma: Vec::new(),
        returns: Vec::new(),
        k_bar: None,
        ell: None,
        censored: false,
        post_ell_ratio: 0.0,
    };
    let mut failed_at: Option<usize> = None;
    loop {
        while !coupling.in_b(&pair) {
            if t >= horizon {
                rec.censored = true;
                return rec;
            }
            coupling.step(&mut pair, rng);
            t += 1;
        }
        if let Some(f) = failed_at.take() {
            rec.returns.push(t - f);
        }
        rec.rho.push(t);
        let start = t;
        coupling.begin_attempt(&mut pair, rng);
        let mut worst: f64 = 0.0;
        loop {
            let lag = t - start;
            let bound = c * ((lag + 1) as f64).powf(-p);
            let d = coupling.distance(&pair);
            if d >= bound {
                rec.sigma.push(lag);
                failed_at = Some(t);
                break;
            }
            worst = worst.max(d / bound);
            if coupling.settled(&pair) {
                rec.k_bar = Some(rec.rho.len() - 1);
                rec.ell = Some(start);
                rec.post_ell_ratio = worst;
                return rec;
            }
            if t >= horizon {
                rec.censored = true;
                return rec;
            }
            coupling.step(&mut pair, rng);
            t += 1;
        }
    }
}

/// `τ_B = t₀` from every start outside `B`; each attempt fails at lag `s₀`
/// with probability `1 − success` and otherwise squeezes forever.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricToy {
    pub success: f64,
    pub t0: usize,
    pub s0: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GeometricPair {
    Away(usize),
    Trying { elapsed: usize, fail: bool },
}

impl GeometricToy {
    pub fn new(success: f64, t0: usize, s0: usize) -> Result<GeometricToy> {
        if !(0.0..=1.0).contains(&success) {
            return Err(invalid("success", "must lie in [0, 1]"));
        }
        if s0 == 0 {
            return Err(invalid("s0", "failure lag must be at least 1"));
        }
        Ok(GeometricToy { success, t0, s0 })
    }

    /// `Σ_k δ(1−δ)^k (t₀ + k(s₀+t₀))^{p0}`.
    pub fn exact_ell_moment(&self, p0: f64) -> f64 {
        let d = self.success;
        if d == 0.0 {
            return f64::INFINITY;
        }
        let step = (self.s0 + self.t0) as f64;
        let mut total = 0.0;
        let mut weight = d;
        for k in 0.. {
            let term = weight * (self.t0 as f64 + k as f64 * step).powf(p0);
            total += term;
            weight *= 1.0 - d;
            if weight == 0.0 || (k > 10 && term < 1e-17 * total) {
                break;
            }
        }
        total
    }
}

impl AbstractCoupling for GeometricToy {
    type Pair = GeometricPair;

    fn monitor(&self) -> (f64, f64) {
        (1.0, 1.0)
    }

    fn initial_pair(&self, _level: f64) -> GeometricPair {
        GeometricPair::Away(self.t0)
    }

    fn g(&self, _pair: &GeometricPair) -> f64 {
        1.0
    }

    fn in_b(&self, pair: &GeometricPair) -> bool {
        matches!(pair, GeometricPair::Away(0) | GeometricPair::Trying { .. })
    }

    fn distance(&self, pair: &GeometricPair) -> f64 {
        match pair {
            GeometricPair::Away(_) => f64::INFINITY,
            GeometricPair::Trying { .. } => 0.0,
        }
    }

    fn begin_attempt(&self, pair: &mut GeometricPair, rng: &mut ChaCha8Rng) {
        let fail = rng.random::<f64>() >= self.success;
        *pair = GeometricPair::Trying { elapsed: 0, fail };
    }

    fn step(&self, pair: &mut GeometricPair, _rng: &mut ChaCha8Rng) {
        *pair = match *pair {
            GeometricPair::Away(r) => GeometricPair::Away(r.saturating_sub(1)),
            GeometricPair::Trying { elapsed, fail } => {
                if fail && elapsed + 1 == self.s0 {
                    GeometricPair::Away(self.t0)
                } else {
                    GeometricPair::Trying {
                        elapsed: elapsed + 1,
                        fail,
                    }
                }
            }
        }
    }

    fn settled(&self, pair: &GeometricPair) -> bool {
        matches!(pair, GeometricPair::Trying { fail: false, .. })
    }
}

/// Pair written as a common part `m` and a difference `δ`. While coupled,
/// `δ ← λδ` and the copies decouple with probability `κ|δ|/r` per step;
/// decoupling kicks `δ` past the monitor and `m` by a Pareto(`α`) jump.
/// Outside the unit ball both parts return to 0 at unit speed, so return
/// times to `B = {|m| ≤ 1, |δ| ≤ 1}` inherit the Pareto tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArToy {
    pub lambda: f64,
    pub kappa: f64,
    pub alpha: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArPair {
    pub m: f64,
    pub delta: f64,
    pub coupled: bool,
}

const AR_MONITOR_C: f64 = 4.0;
const AR_MONITOR_P: f64 = 2.0;
/// Differences below this are merged.
const AR_COALESCE: f64 = 1e-12;

impl Default for ArToy {
    fn default() -> ArToy {
        ArToy {
            lambda: 0.5,
            kappa: 0.2,
            alpha: 2.5,
            noise: 0.3,
        }
    }
}

impl ArToy {
    pub fn new(lambda: f64, kappa: f64, alpha: f64, noise: f64) -> Result<ArToy> {
        if !(lambda > 0.0 && lambda <= 0.5) {
            return Err(invalid("lambda", "must lie in (0, 0.5]"));
        }
        if !(kappa >= 0.0 && kappa < 1.0 - lambda) {
            return Err(invalid("kappa", "need 0 ≤ κ < 1 − λ"));
        }
        if !(alpha > 1.0) {
            return Err(invalid("alpha", "must exceed 1"));
        }
        if !(noise >= 0.0 && noise <= 1.0 - lambda) {
            return Err(invalid("noise", "need 0 ≤ noise ≤ 1 − λ"));
        }
        Ok(ArToy {
            lambda,
            kappa,
            alpha,
            noise,
        })
    }

    /// Certified `P(σ = ∞ | start in B) ≥ 1 − κ/(1−λ)`.
    pub fn certified_delta1(&self) -> f64 {
        1.0 - self.kappa / (1.0 - self.lambda)
    }

    fn toward_zero(&self, x: f64) -> f64 {
        if x.abs() <= 1.0 {
            self.lambda * x
        } else {
            x - x.signum()
        }
    }
}

impl AbstractCoupling for ArToy {
    type Pair = ArPair;

    fn monitor(&self) -> (f64, f64) {
        (AR_MONITOR_C, AR_MONITOR_P)
    }

    fn initial_pair(&self, level: f64) -> ArPair {
        ArPair {
            m: level,
            delta: 1.0,
            coupled: false,
        }
    }

    fn g(&self, pair: &ArPair) -> f64 {
        1.0 + pair.m.abs() + pair.delta.abs()
    }

    fn in_b(&self, pair: &ArPair) -> bool {
        pair.m.abs() <= 1.0 && pair.delta.abs() <= 1.0
    }

    fn distance(&self, pair: &ArPair) -> f64 {
        pair.delta.abs()
    }

    fn begin_attempt(&self, pair: &mut ArPair, _rng: &mut ChaCha8Rng) {
        pair.coupled = true;
    }

    fn step(&self, pair: &mut ArPair, rng: &mut ChaCha8Rng) {
        let shared = self.noise * (2.0 * rng.random::<f64>() - 1.0);
        pair.m = self.toward_zero(pair.m) + shared;
        if pair.coupled {
            if rng.random::<f64>() < self.kappa * pair.delta.abs() {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let kick: f64 = Exp1.sample(rng);
                pair.delta = sign * (AR_MONITOR_C + 1.0 + kick);
                let jump = Pareto::new(1.0, self.alpha).expect("alpha > 1").sample(rng);
                pair.m += sign * jump;
                pair.coupled = false;
            } else {
                pair.delta *= self.lambda;
                if pair.delta.abs() < AR_COALESCE {
                    pair.delta = 0.0;
                }
            }
        } else {
            pair.delta = self.toward_zero(pair.delta);
        }
    }

    fn settled(&self, pair: &ArPair) -> bool {
        pair.coupled && pair.delta == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderRow {
    pub k: usize,
    pub finite: usize,
    pub resolved: usize,
    pub p_hat: f64,
    pub ci: (f64, f64),
    pub stderr: f64,
    /// `(1 − δ₁)^k`.
    pub bound: f64,
    pub within_bound: bool,
    /// `E[1_{ρ_k<∞} ρ_k^p]` over resolved ladders.
    pub rho_moment: f64,
    /// `rho_moment / (k+2)^{p+1}`.
    pub rho_moment_scaled: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionReport {
    pub constants: HypothesisConstants,
    pub ladders: usize,
    pub censored: usize,
    pub horizon: usize,
    pub rows: Vec<LadderRow>,
    pub attempts: usize,
    /// Fraction of attempts with `σ = ∞`, with its Wilson interval.
    pub p_sigma_inf: f64,
    pub p_sigma_inf_ci: (f64, f64),
    /// Upper Wilson bound on `P(σ = ∞)` falls below the supplied `δ₁`.
    pub hypothesis_violated: bool,
    /// `E[1_{ρ<∞} ρ^p]` per attempt and its standard error.
    pub m_hat: f64,
    pub m_hat_stderr: f64,
    pub p0: f64,
    /// `E ℓ^{p0}` over uncensored ladders.
    pub ell_moment: f64,
    pub ell_moment_stderr: f64,
    pub post_ell_max_ratio: f64,
    pub geometric_domination: bool,
}

pub fn run_ladders<C: AbstractCoupling>(
    coupling: &C,
    level: f64,
    ladders: usize,
    horizon: usize,
    seed: u64,
) -> Vec<LadderRecord> {
    par_map_indexed(ladders, |i| {
        let mut rng = stream(seed, StreamTag::Ladder, i as u64);
        simulate_ladder(coupling, coupling.initial_pair(level), &mut rng, horizon)
    })
}

pub fn verify_criterion<C: AbstractCoupling>(
    coupling: &C,
    constants: &HypothesisConstants,
    ladders: usize,
    p0: f64,
    horizon: usize,
    k_max: usize,
    seed: u64,
) -> Result<CriterionReport> {
    constants.validate()?;
    if ladders == 0 {
        return Err(invalid("ladders", "need at least one ladder"));
    }
    if !(p0 > 0.0) {
        return Err(invalid("p0", "must be positive"));
    }
    let records = run_ladders(coupling, 1.0, ladders, horizon, seed);
    Ok(summarize(constants, &records, p0, horizon, k_max))
}

fn summarize(
    constants: &HypothesisConstants,
    records: &[LadderRecord],
    p0: f64,
    horizon: usize,
    k_max: usize,
) -> CriterionReport {
    let n = records.len();
    let p = constants.p;
    let mut rows = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let finite = records.iter().filter(|r| r.rho.len() > k).count();
        let resolved = records
            .iter()
            .filter(|r| r.rho.len() > k || !r.censored)
            .count();
        let p_hat = if resolved == 0 {
            0.0
        } else {
            finite as f64 / resolved as f64
        };
        let stderr = if resolved == 0 {
            0.0
        } else {
            (p_hat * (1.0 - p_hat) / resolved as f64).sqrt()
        };
        let bound = (1.0 - constants.delta1).powi(k as i32);
        let moments: Vec<f64> = records
            .iter()
            .filter(|r| r.rho.len() > k || !r.censored)
            .map(|r| r.rho.get(k).map_or(0.0, |&x| (x as f64).powf(p)))
            .collect();
        let rho_moment = if moments.is_empty() {
            0.0
        } else {
            mean(&moments)
        };
        rows.push(LadderRow {
            k,
            finite,
            resolved,
            p_hat,
            ci: wilson_interval(finite, resolved, Z95),
            stderr,
            bound,
            within_bound: p_hat <= bound + 3.0 * stderr,
            rho_moment,
            rho_moment_scaled: rho_moment / ((k + 2) as f64).powf(p + 1.0),
        });
    }
    let failures: usize = records.iter().map(|r| r.sigma.len()).sum();
    let successes = records.iter().filter(|r| r.ell.is_some()).count();
    let attempts = failures + successes;
    let p_sigma_inf_ci = wilson_interval(successes, attempts, Z95);
    let mut per_attempt: Vec<f64> = records
        .iter()
        .flat_map(|r| r.attempt_lengths())
        .map(|x| (x as f64).powf(p))
        .collect();
    per_attempt.extend(std::iter::repeat_n(0.0, successes));
    let ells: Vec<f64> = records
        .iter()
        .filter_map(|r| r.ell)
        .map(|x| (x as f64).powf(p0))
        .collect();
    let empty_or = |v: &[f64], f: fn(&[f64]) -> f64| if v.is_empty() { f64::NAN } else { f(v) };
    CriterionReport {
        constants: *constants,
        ladders: n,
        censored: records.iter().filter(|r| r.censored).count(),
        horizon,
        geometric_domination: rows.iter().all(|r| r.within_bound),
        rows,
        attempts,
        p_sigma_inf: if attempts == 0 {
            0.0
        } else {
            successes as f64 / attempts as f64
        },
        p_sigma_inf_ci,
        hypothesis_violated: p_sigma_inf_ci.1 < constants.delta1,
        m_hat: empty_or(&per_attempt, mean),
        m_hat_stderr: empty_or(&per_attempt, std_err),
        p0,
        ell_moment: empty_or(&ells, mean),
        ell_moment_stderr: empty_or(&ells, std_err),
        post_ell_max_ratio: records.iter().map(|r| r.post_ell_ratio).fold(0.0, f64::max),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub level: f64,
    pub g: f64,
    pub ell_moment: f64,
    pub ell_moment_stderr: f64,
    pub censored: usize,
    /// `E ℓ^{p0} / (G + 1)`.
    pub ratio: f64,
}

/// `E ℓ^{p0}` from initial pairs of increasing size.
pub fn g_sweep<C: AbstractCoupling>(
    coupling: &C,
    levels: &[f64],
    ladders: usize,
    p0: f64,
    horizon: usize,
    seed: u64,
) -> Vec<SweepPoint> {
    levels
        .iter()
        .map(|&level| {
            let records = run_ladders(coupling, level, ladders, horizon, seed);
            let ells: Vec<f64> = records
                .iter()
                .filter_map(|r| r.ell)
                .map(|x| (x as f64).powf(p0))
                .collect();
            let g = coupling.g(&coupling.initial_pair(level));
            let m = mean(&ells);
            SweepPoint {
                level,
                g,
                ell_moment: m,
                ell_moment_stderr: std_err(&ells),
                censored: records.iter().filter(|r| r.censored).count(),
                ratio: m / (g + 1.0),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_q_above_p() {
        let c = HypothesisConstants {
            delta1: 0.5,
            p: 1.5,
            q: 2.0,
            c: 1.0,
            k: 1.0,
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn immediate_success_gives_ell_tau_b() {
        let toy = GeometricToy::new(1.0, 4, 3).unwrap();
        let mut rng = stream(1, StreamTag::Ladder, 0);
        let r = simulate_ladder(&toy, toy.initial_pair(1.0), &mut rng, 100);
        assert_eq!(r.ell, Some(4));
        assert_eq!(r.k_bar, Some(0));
        assert_eq!(r.tau_b(), Some(4));
    }

    #[test]
    fn zero_tau_b_and_sure_success_gives_zero() {
        let toy = GeometricToy::new(1.0, 0, 1).unwrap();
        let mut rng = stream(1, StreamTag::Ladder, 0);
        let r = simulate_ladder(&toy, toy.initial_pair(1.0), &mut rng, 10);
        assert_eq!(r.ell, Some(0));
    }

    #[test]
    fn never_succeeding_toy_is_censored() {
        let toy = GeometricToy::new(0.0, 1, 1).unwrap();
        let mut rng = stream(1, StreamTag::Ladder, 0);
        let r = simulate_ladder(&toy, toy.initial_pair(1.0), &mut rng, 50);
        assert!(r.censored);
        assert!(r.ell.is_none());
        assert!(r.rho.len() > 10);
    }

    #[test]
    fn ar_toy_certified_delta() {
        let toy = ArToy::default();
        assert!((toy.certified_delta1() - 0.6).abs() < 1e-15);
        assert!(ArToy::new(0.5, 0.6, 2.0, 0.1).is_err());
    }
}
