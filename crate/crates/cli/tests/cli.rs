use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SIMULATE: &str = r#"
experiment = "simulate"
seed = 4

[grid]
L_over_pi = 16
n = 128

[dynamics]
a = 0.5
dt = 0.002
t_end = 2.0

[noise]
modes = 0
amplitude = 0.0
forcing = 0.0

[initial]
kind = "random"
radius = 3.0
"#;

fn kse_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kse-lab"))
        .args(args)
        .output()
        .expect("spawn kse-lab")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run(experiment: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        experiment,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    kse_lab(&args)
}

fn summary_value(summary: &str, key: &str) -> f64 {
    let line = summary
        .lines()
        .find(|l| l.starts_with(key))
        .unwrap_or_else(|| panic!("no `{key}` in summary:\n{summary}"));
    line.rsplit(' ').next().unwrap().parse().unwrap()
}

#[test]
fn unforced_simulation_reports_decay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sim.toml", SIMULATE);
    let out = dir.path().join("out");
    let o = run("simulate", &cfg, &out, &[]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    let ratio = summary_value(&summary, "max_t |u(t)| e^(at) / |u0|");
    assert!(ratio <= 1.0 + 1e-9, "ratio {ratio}");
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("t,l2,h1,h2,phi_l2\n"));
    assert_eq!(csv.lines().count(), 1 + 1001);
    assert!(!dir.path().join("out.partial").exists());
}

#[test]
fn negative_dt_is_a_validation_error_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.toml",
        &SIMULATE.replace("dt = 0.002", "dt = -0.002"),
    );
    let out = dir.path().join("out");
    let o = run("simulate", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dt"));
    assert!(!out.exists());
    assert!(!dir.path().join("out.partial").exists());
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.toml",
        &SIMULATE.replace("[noise]", "[noise]\nsigma = 1.0"),
    );
    let out = dir.path().join("out");
    let o = run("simulate", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sigma"));
    assert!(!out.exists());
}

#[test]
fn missing_damping_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &SIMULATE.replace("a = 0.5\n", ""));
    let o = run("simulate", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn command_must_match_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sim.toml", SIMULATE);
    let o = run("couple", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn blow_up_exits_with_its_own_code_and_cleans_up() {
    let dir = tempfile::tempdir().unwrap();
    let text = SIMULATE.replace("t_end = 2.0", "t_end = 2.0\nblowup_guard = 1.0");
    let cfg = write_config(dir.path(), "sim.toml", &text);
    let out = dir.path().join("out");
    let o = run("simulate", &cfg, &out, &[]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(!out.exists());
    assert!(!dir.path().join("out.partial").exists());
}

#[test]
fn reruns_are_byte_identical_and_seed_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let text = SIMULATE
        .replace("modes = 0", "modes = 8")
        .replace("amplitude = 0.0", "amplitude = 1.0");
    let cfg = write_config(dir.path(), "sim.toml", &text);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    assert_eq!(
        run("simulate", &cfg, &a, &["--workers", "2"]).status.code(),
        Some(0)
    );
    assert_eq!(run("simulate", &cfg, &b, &[]).status.code(), Some(0));
    assert_eq!(
        run("simulate", &cfg, &c, &["--seed", "5"]).status.code(),
        Some(0)
    );
    for f in [
        "trajectory.csv",
        "final.bin",
        "manifest.json",
        "summary.txt",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_ne!(
        fs::read(a.join("final.bin")).unwrap(),
        fs::read(c.join("final.bin")).unwrap()
    );
}

#[test]
fn manifest_hashes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sim.toml", SIMULATE);
    let out = dir.path().join("out");
    assert_eq!(
        run("simulate", &cfg, &out, &["--format", "json"])
            .status
            .code(),
        Some(0)
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["config"]["dynamics"]["a"], 0.5);
    let files = manifest["files"].as_array().unwrap();
    let names: Vec<&str> = files.iter().map(|f| f["path"].as_str().unwrap()).collect();
    assert!(names.contains(&"trajectory.json"));
    assert!(names.contains(&"summary.txt"));
    assert!(!names.contains(&"timings.json"));
    for f in files {
        let bytes = fs::read(out.join(f["path"].as_str().unwrap())).unwrap();
        assert_eq!(
            f["sha256"].as_str().unwrap(),
            kse_core::io::sha256_hex(&bytes)
        );
    }
}

#[test]
fn refuses_to_overwrite_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sim.toml", SIMULATE);
    let out = dir.path().join("out");
    fs::create_dir(&out).unwrap();
    fs::write(out.join("keep.txt"), "x").unwrap();
    let o = run("simulate", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(fs::read_to_string(out.join("keep.txt")).unwrap(), "x");
}

#[test]
fn shipped_configs_parse_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = kse_lab::config::RunConfig::load(&path).unwrap();
        cfg.validate(cfg.seed.unwrap(), &dir)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert!(seen >= 8);
}

#[test]
fn criterion_experiment_matches_the_exact_moment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/criterion.toml");
    let out = dir.path().join("out");
    let o = run("criterion", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let est = report["report"]["ell_moment"].as_f64().unwrap();
    let se = report["report"]["ell_moment_stderr"].as_f64().unwrap();
    let exact = report["exact_ell_moment"].as_f64().unwrap();
    assert!((exact - 114.0).abs() < 1e-9, "{exact}");
    assert!((est - exact).abs() <= 4.0 * se, "{est} ± {se}");
}
