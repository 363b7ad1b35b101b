use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(dir: &Path, scenario: &str, config: &str, extra: &[&str]) -> Output {
    let cfg = dir.join("config.toml");
    fs::write(&cfg, config).unwrap();
    let out = dir.join("out");
    Command::new(env!("CARGO_BIN_EXE_insider-lab"))
        .arg(scenario)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(extra)
        .output()
        .unwrap()
}

fn csv(dir: &Path, scenario: &str) -> Vec<Vec<String>> {
    fs::read_to_string(dir.join("out").join(format!("{scenario}.csv")))
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn column(rows: &[Vec<String>], name: &str) -> Vec<f64> {
    let j = rows[0].iter().position(|c| c == name).unwrap_or_else(|| panic!("no column {name}"));
    rows[1..].iter().map(|r| r[j].parse().unwrap()).collect()
}

const HARVEST: &str = "alpha = 0.1\nbeta_birth = 0.3\ndelay = 0.25\ndt = 1e-3\n";

#[test]
fn harvest_without_births_has_exponential_factor() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), "harvest", "alpha = 0.4\nbeta_birth = 0.0\ndelay = 0.25\ndt = 1e-2\n", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv(dir.path(), "harvest");
    for (t, g) in column(&rows, "t").into_iter().zip(column(&rows, "g")) {
        assert!((g - (0.4 * (t - 1.0)).exp()).abs() < 1e-12, "t {t}");
    }
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/harvest.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["beta_birth"], 0.0);
    assert!(meta["wall_time_seconds"].as_f64().unwrap() >= 0.0);
    assert!(meta["versions"]["sdde_insider"].is_string());
}

#[test]
fn missing_dt_exits_one_without_outputs() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), "harvest", "alpha = 0.1\nbeta_birth = 0.3\ndelay = 0.25\n", &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dt"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_scenario_and_bad_gamma_exit_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run(dir.path(), "harvesting", HARVEST, &[]).status.code(), Some(1));
    let o = run(dir.path(), "harvest", &format!("{HARVEST}gamma = 1.5\n"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gamma in (0, 1)"));
}

#[test]
fn coinciding_horizons_are_refused_for_portfolio() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), "portfolio", "dt = 1e-2\nt0 = 1.0\n", &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("viability-sweep"));
}

#[test]
fn viability_sweep_schema() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), "viability-sweep", "dt = 1e-2\nt0_list = [2.0, 1.5, 1.1]\npaths = 2000\n", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv(dir.path(), "viability-sweep");
    assert_eq!(&rows[0][..5], ["T0", "mc_mean", "mc_stderr", "analytic", "gap_sigmas"]);
    assert_eq!(rows.len(), 4);
    let analytic = column(&rows, "analytic");
    assert!((analytic[0] - 0.5 * 2f64.ln()).abs() < 1e-14);
}

#[test]
fn sweep_reports_analytic_value_at_coinciding_horizon() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), "viability-sweep", "dt = 1e-2\nt0_list = [2.0, 1.5, 1.0]\npaths = 100\n", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv(dir.path(), "viability-sweep");
    assert_eq!(rows[3][0], "1.0");
    assert_eq!(rows[3][1], "");
    assert_eq!(rows[3][3], "inf");
}

#[test]
fn identical_config_gives_identical_csv() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let cfg = "dt = 1e-2\nt0 = 2.0\npaths = 500\nseed = 42\n";
    assert!(run(a.path(), "portfolio", cfg, &[]).status.success());
    assert!(run(b.path(), "portfolio", cfg, &[]).status.success());
    let read = |d: &TempDir| fs::read(d.path().join("out/portfolio.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    let c = TempDir::new().unwrap();
    assert!(run(c.path(), "portfolio", cfg, &["--seed", "43"]).status.success());
    assert_ne!(read(&a), read(&c));
}

#[test]
fn flags_override_config_keys() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), "forward-integral-check", "dt = 0.3\npaths = 50\n", &["--dt", "1e-2", "--paths", "300", "--seed", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv(dir.path(), "forward-integral-check");
    assert_eq!(column(&rows, "n_paths"), vec![300.0]);
    assert_eq!(column(&rows, "dt"), vec![1e-2]);
    assert_eq!(column(&rows, "seed"), vec![5.0]);
}

#[test]
fn enforced_tolerance_failure_exits_two_with_outputs() {
    let dir = TempDir::new().unwrap();
    // A zero-width tolerance cannot be met by any Monte Carlo estimate.
    let o = run(dir.path(), "forward-integral-check", "dt = 1e-2\npaths = 200\nenforce_sigma = 0.0\n", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("forward-integral mean"));
    assert!(dir.path().join("out/forward-integral-check.csv").exists());
}

#[test]
fn remaining_scenarios_run() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), "donsker-check", "dt = 1e-2\npaths = 500\n", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv(dir.path(), "donsker-check");
    assert_eq!(rows.len(), 1 + 9);
    assert!(column(&rows, "normalization_error").iter().all(|e| *e < 1e-6));

    let o = run(dir.path(), "absde-solve", "dt = 1e-2\na = 0.1\nc = 0.3\ndelay = 0.25\n", &[]);
    assert!(o.status.success());
    let rows = csv(dir.path(), "absde-solve");
    assert!((column(&rows, "g")[0] - 1.1243496099637063).abs() < 1e-12);

    let o = run(dir.path(), "maxprinciple-verify", &format!("{HARVEST}paths = 300\n"), &["--dt", "1e-2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv(dir.path(), "maxprinciple-verify");
    assert_eq!(rows[1][0], "max_abs_hu");
    assert!(rows[1][1].parse::<f64>().unwrap() < 1e-10);
}
