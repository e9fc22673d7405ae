use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const UNIFORM_1D: &str = "geometry.d = 1
field.K = 3
field.marginal = 2 2 1/4
field.marginal = 2 3 1/4
field.marginal = 3 2 1/4
field.marginal = 3 3 1/4
kernel.preset = lazy-srw-1d
lambda = 1
fA = 1/N0
fD = 0.5
";

const PAIR: &str = "geometry.d = 1
geometry.L = 2
field.K = 2
field.marginal = 2 2 1
kernel.preset = lazy-srw-1d
lambda = 1
initial.law = explicit
initial.X = 1 0
initial.Y = 0 0
seed = 3
";

fn run(dir: &Path, command: &str, config: &str, extra: &[&str]) -> Output {
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_seedbank"))
        .arg(command)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(extra)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(i).unwrap().to_string()).collect()
}

#[test]
fn homogenize_reports_exact_theta_and_rho() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{UNIFORM_1D}geometry.L = lazy\nseed = 1\n");
    let o = run(dir.path(), "homogenize", &cfg, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("theta=0.45918367346938777 (45/98) rho=1.0416666666666667 (25/24)"));
}

#[test]
fn fixation_study_matches_harmonic_value_and_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), "fixation-study", PAIR, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/fixation_study.csv")).unwrap();
    let exact: f64 = column(&csv, "exact_fixation")[0].parse().unwrap();
    let oracle: f64 = column(&csv, "oracle")[0].parse().unwrap();
    assert_eq!(exact, 0.125);
    assert!((oracle - 0.125).abs() < 1e-10);
}

#[test]
fn duality_check_exact_residual_is_tiny() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{PAIR}horizon.t = 0.5, 2\n");
    let o = run(dir.path(), "duality-check", &cfg, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/duality.csv")).unwrap();
    let diffs = column(&csv, "abs_diff");
    assert_eq!(diffs.len(), 8);
    for d in diffs {
        assert!(d.parse::<f64>().unwrap() < 1e-9);
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{UNIFORM_1D}geometry.L = 6\nreplicas = 50\nhorizon.t = 1\nseed = 11\n");
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let o = run(dir.path(), "dual-kernel", &cfg, &[]);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(fs::read(dir.path().join("out/dual_kernel.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{UNIFORM_1D}geometry.L = 4\nseed = 1\n");
    let o = run(dir.path(), "gen-env", &cfg, &["--seed", "99"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/environment.csv")).unwrap();
    assert!(column(&csv, "seed").iter().all(|s| s == "99"));
}

#[test]
fn unknown_key_is_rejected_with_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{PAIR}kernel.bogus = 1\n");
    let o = run(dir.path(), "fixation-study", &cfg, &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("kernel.bogus"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn missing_seed_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{UNIFORM_1D}geometry.L = 4\n");
    let o = run(dir.path(), "gen-env", &cfg, &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("seed"));
}

#[test]
fn command_key_must_match_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{PAIR}command = spectrum\n");
    let o = run(dir.path(), "fixation-study", &cfg, &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("command"));
}

#[test]
fn torus_only_commands_reject_lazy_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{UNIFORM_1D}geometry.L = lazy\nseed = 1\n");
    let o = run(dir.path(), "spectrum", &cfg, &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("geometry.L"));
}

#[test]
fn spectrum_has_simple_unit_eigenvalue() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{UNIFORM_1D}geometry.L = 8\nenv.count = 2\nseed = 5\n");
    let o = run(dir.path(), "spectrum", &cfg, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/spectrum.csv")).unwrap();
    assert!(column(&csv, "one_multiplicity").iter().all(|m| m == "1"));
    for g in column(&csv, "gap_to_minus_one") {
        assert!(g.parse::<f64>().unwrap() > 0.0);
    }
}

#[test]
fn lln_writes_summary_and_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{}geometry.L = lazy\nhorizon.steps = 20000\nreplicas = 1\nseed = 2\n", UNIFORM_1D.replace("lazy-srw-1d", "drift-1d"));
    let o = run(dir.path(), "lln", &cfg, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("velocity_target=(0.04897959183673469 (12/245)"));
    let traj = fs::read_to_string(dir.path().join("out/lln_trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1001);
}
