//! Experiment dispatch and artifact handling. Every run writes into
//! `<out>.partial` and is renamed into place only once it has finished.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use kse_core::coupling::{
    drift_bound_constant, foias_prodi_check, novikov_integral, perturb, run_coupled,
    squeezing_stats, tv_bound, FpVariant, SqueezeConfig,
};
use kse_core::criterion::{verify_criterion, CriterionReport};
use kse_core::dynamics::simulate;
use kse_core::io::{csv_table, encode_field, sha256_hex, write_checkpoint};
use kse_core::mixing::{
    dual_lipschitz_distance, fit_polynomial_rate, lyapunov_drift, recurrence_experiment,
    run_ensemble, FeatureSchema, LipschitzDictionary, RecurrenceConfig, DICTIONARY_VERSION,
};
use kse_core::rng::{stream, StreamTag};
use kse_core::spectral::random_smooth_field;
use kse_core::LabError;
use serde::Serialize;
use serde_json::json;

use crate::acceptance::{run_all, Sizes};
use crate::config::{Experiment, RunConfig, SuiteSize, Toy};

pub const EXIT_OK: u8 = 0;
pub const EXIT_IO: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_BLOWUP: u8 = 3;
pub const EXIT_ACCEPTANCE: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    BlowUp(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::BlowUp(_) => EXIT_BLOWUP,
            CliError::Runtime(_) => EXIT_IO,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid configuration: {m}"),
            CliError::BlowUp(m) => write!(f, "simulation blew up: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        match e {
            LabError::InvalidGrid(_)
            | LabError::InvalidParameter { .. }
            | LabError::GridMismatch
            | LabError::SchemaMismatch(_)
            | LabError::Format(_) => CliError::Validation(e.to_string()),
            LabError::BlowUp { .. } | LabError::NonFinite { .. } => CliError::BlowUp(e.to_string()),
            LabError::NoiseMismatch(_) | LabError::InsufficientData(_) | LabError::Io(_) => {
                CliError::Runtime(e.to_string())
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("i/o: {e}"))
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// What a finished experiment reports back.
pub struct Finished {
    pub summary: Vec<String>,
    pub acceptance_failed: bool,
}

struct Sink<'a> {
    dir: &'a Path,
    format: Format,
}

impl Sink<'_> {
    fn bytes(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    fn json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::Runtime(format!("serializing {name}: {e}")))?;
        text.push('\n');
        self.bytes(name, text.as_bytes())
    }

    /// A numeric table as `<stem>.csv` or `<stem>.json`.
    fn table(&self, stem: &str, header: &[&str], rows: Vec<Vec<f64>>) -> Result<()> {
        match self.format {
            Format::Csv => self.bytes(&format!("{stem}.csv"), csv_table(header, rows).as_bytes()),
            Format::Json => self.json(
                &format!("{stem}.json"),
                &json!({ "columns": header, "rows": rows }),
            ),
        }
    }
}

pub struct Invocation {
    pub config_path: PathBuf,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub format: Format,
    pub workers: Option<usize>,
    /// Experiment named on the command line, checked against the config.
    pub expected: Option<Experiment>,
}

fn partial_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_else(|| "out".into());
    name.push(".partial");
    out.with_file_name(name)
}

/// Parses, validates and runs. Returns the exit status; output directories
/// are only ever left behind complete.
pub fn run_command(inv: &Invocation) -> (u8, Vec<String>) {
    let started = Instant::now();
    let (config, seed) = match load(inv) {
        Ok(x) => x,
        Err(e) => return (e.exit_code(), vec![e.to_string()]),
    };
    if let Some(w) = inv.workers {
        if w == 0 {
            return (EXIT_VALIDATION, vec!["--workers must be at least 1".into()]);
        }
        // A second global pool cannot be installed; the first one stays.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global();
    }
    if inv.out.exists() && fs::read_dir(&inv.out).map_or(true, |mut d| d.next().is_some()) {
        return (
            EXIT_IO,
            vec![format!(
                "output directory {} exists and is not empty",
                inv.out.display()
            )],
        );
    }
    let partial = partial_path(&inv.out);
    let result = fs::remove_dir_all(&partial)
        .or_else(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Ok(()),
            _ => Err(e),
        })
        .map_err(CliError::from)
        .and_then(|_| fs::create_dir_all(&partial).map_err(CliError::from))
        .and_then(|_| execute(&config, seed, inv, &partial))
        .and_then(|done| {
            finalize(&config, seed, inv, &partial, &done, started)?;
            Ok(done)
        });
    match result {
        Ok(done) => {
            let code = if done.acceptance_failed {
                EXIT_ACCEPTANCE
            } else {
                EXIT_OK
            };
            (code, done.summary)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&partial);
            (e.exit_code(), vec![e.to_string()])
        }
    }
}

fn load(inv: &Invocation) -> Result<(RunConfig, u64)> {
    let mut config = RunConfig::load(&inv.config_path).map_err(|e| match e {
        LabError::Io(m) => CliError::Runtime(format!("reading {}: {m}", inv.config_path.display())),
        other => CliError::from(other),
    })?;
    let seed = inv.seed.or(config.seed).ok_or_else(|| {
        CliError::Validation("a seed is required (`seed` in the config or --seed)".into())
    })?;
    config.seed = Some(seed);
    if let Some(e) = inv.expected {
        if e != config.experiment {
            return Err(CliError::Validation(format!(
                "command `{}` does not match experiment `{}` in the config",
                e.name(),
                config.experiment.name()
            )));
        }
    }
    config.validate(seed, base_dir(&inv.config_path))?;
    Ok((config, seed))
}

fn base_dir(config_path: &Path) -> &Path {
    config_path.parent().unwrap_or(Path::new("."))
}

fn execute(config: &RunConfig, seed: u64, inv: &Invocation, dir: &Path) -> Result<Finished> {
    let sink = Sink {
        dir,
        format: inv.format,
    };
    let base = base_dir(&inv.config_path);
    match config.experiment {
        Experiment::Simulate => simulate_cmd(config, seed, base, &sink),
        Experiment::Couple => couple_cmd(config, seed, base, &sink),
        Experiment::EnsembleMix => mix_cmd(config, seed, base, &sink),
        Experiment::Squeeze => squeeze_cmd(config, seed, base, &sink),
        Experiment::Recurrence => recurrence_cmd(config, seed, base, &sink),
        Experiment::Criterion => criterion_cmd(config, seed, &sink),
        Experiment::VerifyAll => verify_cmd(config, seed, &sink),
    }
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            list_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("listed under root")
                .to_string_lossy()
                .replace('\\', "/");
            out.push(rel);
        }
    }
    Ok(())
}

fn finalize(
    config: &RunConfig,
    seed: u64,
    inv: &Invocation,
    dir: &Path,
    done: &Finished,
    started: Instant,
) -> Result<()> {
    let mut summary = done.summary.join("\n");
    summary.push('\n');
    fs::write(dir.join("summary.txt"), &summary)?;

    let mut names = Vec::new();
    list_files(dir, dir, &mut names)?;
    names.sort();
    let mut files = Vec::with_capacity(names.len());
    for name in &names {
        let bytes = fs::read(dir.join(name))?;
        files.push(json!({ "path": name, "bytes": bytes.len(), "sha256": sha256_hex(&bytes) }));
    }
    let manifest = json!({
        "tool": "kse-lab",
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": config.experiment.name(),
        "seed": seed,
        "format": match inv.format { Format::Csv => "csv", Format::Json => "json" },
        "config": config,
        "files": files,
    });
    let sink = Sink {
        dir,
        format: inv.format,
    };
    sink.json("manifest.json", &manifest)?;
    // Kept out of the manifest: the only file that differs between reruns.
    sink.json(
        "timings.json",
        &json!({
            "wall_seconds": started.elapsed().as_secs_f64(),
            "workers": rayon::current_num_threads(),
        }),
    )?;
    fs::rename(dir, &inv.out).or_else(|_| {
        // `rename` onto an existing empty directory fails on some platforms.
        fs::remove_dir(&inv.out)?;
        fs::rename(dir, &inv.out)
    })?;
    Ok(())
}

fn fmt_opt(t: Option<f64>) -> String {
    t.map_or("not reached".to_string(), |t| format!("{t}"))
}

fn simulate_cmd(config: &RunConfig, seed: u64, base: &Path, sink: &Sink) -> Result<Finished> {
    let r = config.resolve(seed, base)?;
    let traj = simulate(&r.u0, &r.noise, &r.params)?;
    let d = &traj.diagnostics;
    sink.table(
        "trajectory",
        &["t", "l2", "h1", "h2", "phi_l2"],
        (0..d.len())
            .map(|k| vec![d.t[k], d.l2[k], d.h1[k], d.h2[k], d.phi_l2[k]])
            .collect(),
    )?;
    sink.bytes("initial.bin", &encode_field(&r.u0))?;
    sink.bytes("final.bin", &encode_field(traj.final_state()))?;
    let explicit_records = config
        .dynamics
        .as_ref()
        .is_some_and(|d| d.record_every.is_some());
    if explicit_records {
        write_checkpoint(&sink.dir.join("checkpoint"), &traj)?;
    }

    let u0_norm = r.u0.l2_norm();
    let a = r.params.a;
    let mut summary = vec![
        "experiment: simulate".to_string(),
        format!("seed: {seed}"),
        format!(
            "grid: L = {}, n = {}; a = {a}, dt = {}, steps = {}",
            r.grid.half_length(),
            r.grid.n_points(),
            r.params.dt,
            traj.steps
        ),
        format!("noiseless: {}", r.noise.is_noiseless()),
        format!("|u0| = {u0_norm:.6e}"),
        format!(
            "|u(T)| = {:.6e}, |u(T)|_1 = {:.6e}",
            d.l2[d.len() - 1],
            d.h1[d.len() - 1]
        ),
        format!(
            "max_t |u(t)|_1 = {:.6e}",
            d.h1.iter().copied().fold(0.0, f64::max)
        ),
    ];
    if u0_norm > 0.0 {
        let ratio = (0..d.len())
            .map(|k| d.l2[k] * (a * d.t[k]).exp() / u0_norm)
            .fold(0.0, f64::max);
        summary.push(format!("max_t |u(t)| e^(at) / |u0| = {ratio:.12}"));
    }
    Ok(Finished {
        summary,
        acceptance_failed: false,
    })
}

fn couple_cmd(config: &RunConfig, seed: u64, base: &Path, sink: &Sink) -> Result<Finished> {
    let r = config.resolve(seed, base)?;
    let c = config.coupling()?;
    let th = c.threshold.params()?;
    let mut rng = stream(seed, StreamTag::InitialData, 1);
    let u0p = perturb(&r.u0, c.perturbation, &mut rng)?;
    let run = run_coupled(&r.u0, &u0p, c.n_modes, &r.noise, &r.params, &th)?;
    let nov = run.novikov_series();
    let t = run.times();
    sink.table(
        "coupling",
        &["t", "w_l2", "w_h1", "drift_sq", "novikov"],
        (0..t.len())
            .map(|k| vec![t[k], run.w_l2[k], run.w_h1[k], run.drift_sq[k], nov[k]])
            .collect(),
    )?;
    let total = novikov_integral(&run);
    let tv = if run.b_min > 0.0 {
        Some(tv_bound(total, run.b_min)?)
    } else {
        None
    };
    let fp = foias_prodi_check(
        &run,
        FpVariant::Part1,
        c.fp_eps.unwrap_or(0.0),
        c.fp_burn_in.unwrap_or(0.0),
        c.fp_c,
    )?;
    sink.json(
        "report.json",
        &json!({
            "N": c.n_modes,
            "b_min": run.b_min,
            "tau_u": run.tau_u,
            "tau_v": run.tau_v,
            "tau_u_prime": run.tau_u_prime,
            "tau": run.tau,
            "novikov_integral": total,
            "tv_bound": tv,
            "drift_bound_constant": drift_bound_constant(&r.grid, c.n_modes),
            "foias_prodi": fp,
        }),
    )?;
    let last = t.len() - 1;
    let mut summary = vec![
        "experiment: couple".to_string(),
        format!("seed: {seed}"),
        format!("N = {}, b_min = {}", c.n_modes, run.b_min),
        format!("tau = {}", fmt_opt(run.tau.time())),
        format!(
            "|w(0)|_1 = {:.6e}, |w(T)|_1 = {:.6e}",
            run.w_h1[0], run.w_h1[last]
        ),
        format!("novikov integral = {total:.6e}"),
        format!("Foias-Prodi part 1: smallest constant {:.6e}", fp.min_c),
    ];
    match tv {
        Some(tv) => summary.push(format!("total variation bound = {tv:.6e}")),
        None => summary.push("total variation bound: undefined (b_min = 0)".into()),
    }
    if let Some(ok) = fp.certificate {
        summary.push(format!("configured constant certified: {ok}"));
    }
    Ok(Finished {
        summary,
        acceptance_failed: false,
    })
}

fn squeeze_cmd(config: &RunConfig, seed: u64, base: &Path, sink: &Sink) -> Result<Finished> {
    let r = config.resolve(seed, base)?;
    let s = config.squeeze()?;
    let th = s.threshold.params()?;
    let cfg = SqueezeConfig {
        n_modes: s.n_modes,
        t_window: s.t_window,
        d: s.d,
        pairs: s.pairs,
        moment_p: s.moment_p,
        distance_threshold: s.distance_c.zip(s.distance_p),
    };
    let table = squeezing_stats(&cfg, &r.noise, &r.params, &th, seed)?;
    sink.table(
        "squeeze",
        &[
            "k", "p_q1", "p_q1_lo", "p_q1_hi", "p_q2", "p_q2_lo", "p_q2_hi", "censored",
        ],
        table
            .rows
            .iter()
            .map(|row| {
                vec![
                    row.k as f64,
                    row.p_q1,
                    row.p_q1_ci.0,
                    row.p_q1_ci.1,
                    row.p_q2,
                    row.p_q2_ci.0,
                    row.p_q2_ci.1,
                    f64::from(u8::from(row.censored)),
                ]
            })
            .collect(),
    )?;
    sink.json("report.json", &table)?;
    let mut summary = vec![
        "experiment: squeeze".to_string(),
        format!("seed: {seed}"),
        format!("pairs = {}, N = {}", table.pairs, s.n_modes),
        format!(
            "P(sigma = inf) = {:.4} [{:.4}, {:.4}], delta1_hat = {:.4}",
            table.p_sigma_inf, table.p_sigma_inf_ci.0, table.p_sigma_inf_ci.1, table.delta1_hat
        ),
        format!("E[1(sigma<inf) sigma^p] = {:.6e}", table.sigma_moment),
    ];
    if let (Some(q), Some(c)) = (table.q_hat, table.c_hat) {
        summary.push(format!("fitted q = {q:.4}, c = {c:.4}"));
    }
    if table.all_censored {
        summary.push("every window censored".into());
    }
    Ok(Finished {
        summary,
        acceptance_failed: false,
    })
}

fn mix_cmd(config: &RunConfig, seed: u64, base: &Path, sink: &Sink) -> Result<Finished> {
    let r = config.resolve(seed, base)?;
    let m = config.mixing()?;
    let schema = FeatureSchema::new(&r.grid, m.n_coeffs, &m.probes)?;
    let second = random_smooth_field(
        &r.grid,
        m.second_radius,
        &mut stream(seed, StreamTag::InitialData, 1),
    );
    let mut params = r.params.clone();
    params.record_every = 1;
    // Both ensembles use member i's forcing stream: common random numbers.
    let e1 = run_ensemble(
        m.members,
        |_| r.u0.clone(),
        &r.noise,
        seed,
        &params,
        &m.record_times,
        &schema,
    )?;
    let e2 = run_ensemble(
        m.members,
        |_| second.clone(),
        &r.noise,
        seed,
        &params,
        &m.record_times,
        &schema,
    )?;
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for (m1, m2) in e1.measures.iter().zip(&e2.measures) {
        let dict = LipschitzDictionary::for_pair(m1, m2)?;
        let dist = dual_lipschitz_distance(m1, m2, &dict)?;
        series.push((m1.time, dist));
        let f1 = kse_core::stats::mean(&m1.lyapunov_values());
        let f2 = kse_core::stats::mean(&m2.lyapunov_values());
        rows.push(vec![m1.time, dist, f1, f2]);
    }
    sink.table("distance", &["t", "distance", "mean_f_1", "mean_f_2"], rows)?;
    let fit = fit_polynomial_rate(&series, (m.window[0], m.window[1]));
    let drift = e2.measures.last().map(|last| {
        let f0 = kse_core::functionals::lyapunov_f(&second);
        lyapunov_drift(last, f0)
    });
    sink.json(
        "report.json",
        &json!({
            "dictionary_version": DICTIONARY_VERSION,
            "members": m.members,
            "schema": schema,
            "fit": fit.as_ref().ok(),
            "fit_error": fit.as_ref().err().map(|e| e.to_string()),
            "lyapunov_drift_second": drift,
            "failures_first": e1.failures,
            "failures_second": e2.failures,
        }),
    )?;
    let mut summary = vec![
        "experiment: ensemble-mix".to_string(),
        format!("seed: {seed}"),
        format!(
            "members = {}, failures = {} + {}",
            m.members,
            e1.failures.len(),
            e2.failures.len()
        ),
    ];
    if let (Some(first), Some(last)) = (series.first(), series.last()) {
        summary.push(format!(
            "distance: {:.6e} at t = {} to {:.6e} at t = {}",
            first.1, first.0, last.1, last.0
        ));
    }
    match &fit {
        Ok(f) => summary.push(format!(
            "rate fit: p = {:.4}, C = {:.4e}, R2 = {:.4} (exponential R2 {:.4}){}",
            f.p_hat,
            f.c_hat,
            f.r_squared,
            f.exp_r_squared,
            if f.poor_fit { ", poor fit" } else { "" }
        )),
        Err(e) => summary.push(format!("rate fit unavailable: {e}")),
    }
    Ok(Finished {
        summary,
        acceptance_failed: false,
    })
}

fn recurrence_cmd(config: &RunConfig, seed: u64, base: &Path, sink: &Sink) -> Result<Finished> {
    let r = config.resolve(seed, base)?;
    let s = config.recurrence()?;
    let cfg = RecurrenceConfig {
        r: s.r,
        d: s.d,
        t: s.t,
        delta: s.delta,
        members: s.members,
    };
    let report = recurrence_experiment(&cfg, &r.noise, &r.params, seed)?;
    sink.json("report.json", &report)?;
    let summary = vec![
        "experiment: recurrence".to_string(),
        format!("seed: {seed}"),
        format!("R = {}, d = {}, T = {}, delta = {}", s.r, s.d, s.t, s.delta),
        format!(
            "P_hit = {:.4} [{:.4}, {:.4}]",
            report.p_hit, report.p_hit_ci.0, report.p_hit_ci.1
        ),
        format!(
            "P_Gamma = {:.4} [{:.4}, {:.4}]",
            report.p_gamma, report.p_gamma_ci.0, report.p_gamma_ci.1
        ),
        format!(
            "implication violations = {}, failures = {}",
            report.implication_violations, report.failures
        ),
    ];
    Ok(Finished {
        summary,
        acceptance_failed: false,
    })
}

fn criterion_cmd(config: &RunConfig, seed: u64, sink: &Sink) -> Result<Finished> {
    let (c, toy, constants) = config.criterion()?;
    let run = |report: CriterionReport, exact: Option<f64>| -> Result<Vec<String>> {
        sink.table(
            "ladder",
            &[
                "k",
                "finite",
                "resolved",
                "p_hat",
                "ci_lo",
                "ci_hi",
                "bound",
                "within_bound",
                "rho_moment",
            ],
            report
                .rows
                .iter()
                .map(|row| {
                    vec![
                        row.k as f64,
                        row.finite as f64,
                        row.resolved as f64,
                        row.p_hat,
                        row.ci.0,
                        row.ci.1,
                        row.bound,
                        f64::from(u8::from(row.within_bound)),
                        row.rho_moment,
                    ]
                })
                .collect(),
        )?;
        sink.json(
            "report.json",
            &json!({ "report": report, "exact_ell_moment": exact }),
        )?;
        let mut lines = vec![
            "experiment: criterion".to_string(),
            format!("seed: {seed}"),
            format!(
                "ladders = {}, censored = {}, attempts = {}",
                report.ladders, report.censored, report.attempts
            ),
            format!(
                "P(sigma = inf) = {:.4} [{:.4}, {:.4}]; hypothesis violated: {}",
                report.p_sigma_inf,
                report.p_sigma_inf_ci.0,
                report.p_sigma_inf_ci.1,
                report.hypothesis_violated
            ),
            format!(
                "E l^p0 = {:.6e} +- {:.2e} (p0 = {})",
                report.ell_moment, report.ell_moment_stderr, report.p0
            ),
            format!("geometric domination: {}", report.geometric_domination),
        ];
        if let Some(x) = exact {
            lines.push(format!("exact E l^p0 = {x:.6e}"));
        }
        Ok(lines)
    };
    let summary = match toy {
        Toy::Geometric(g) => run(
            verify_criterion(&g, &constants, c.ladders, c.p0, c.horizon, c.k_max, seed)?,
            Some(g.exact_ell_moment(c.p0)),
        )?,
        Toy::Ar(t) => {
            let mut lines = run(
                verify_criterion(&t, &constants, c.ladders, c.p0, c.horizon, c.k_max, seed)?,
                None,
            )?;
            lines.push(format!("certified delta1 = {}", t.certified_delta1()));
            lines
        }
    };
    Ok(Finished {
        summary,
        acceptance_failed: false,
    })
}

fn verify_cmd(config: &RunConfig, seed: u64, sink: &Sink) -> Result<Finished> {
    let sizes = match config.verify()? {
        SuiteSize::Quick => Sizes::quick(),
        SuiteSize::Full => Sizes::full(),
    };
    let outcomes = run_all(&sizes, seed);
    sink.json(
        "acceptance.json",
        &json!({ "sizes": sizes, "outcomes": outcomes }),
    )?;
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    let mut summary = vec![
        "experiment: verify-all".to_string(),
        format!("seed: {seed}"),
    ];
    summary.extend(outcomes.iter().map(|o| o.line()));
    summary.push(format!(
        "{} of {} criteria passed",
        outcomes.len() - failed,
        outcomes.len()
    ));
    Ok(Finished {
        summary,
        acceptance_failed: failed > 0,
    })
}
