//! End-to-end runs of the `blowuplab` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("lab.cfg");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_blowuplab"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .arg("--quiet")
        .args(args)
        .output()
        .unwrap()
}

const KAPPA: &str = "profile_kind = kappa\n[simulate]\nnr = 16\nnz = 160\nsteps = 40\nds = 7.5e-3\n";

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn constant_profile_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    for cmd in ["profile", "spectrum", "corrector", "simulate"] {
        let o = run(dir.path(), KAPPA, &[cmd]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let profile = blowup_lab::io::Table::read(&out.join("profile.csv")).unwrap();
    let a: f64 = profile.meta("a").unwrap().parse().unwrap();
    assert!((a - (1.0_f64 / 6.0).powf(1.0 / 6.0)).abs() < 1e-15);
    assert!(fs::read_to_string(out.join("report.txt")).unwrap().contains("a = 0.7418"));

    let sp = json(&out.join("spectrum.json"));
    assert_eq!(sp["ell0"], 1);
    assert!((sp["eigenvalues"][0].as_f64().unwrap() + 1.0).abs() < 1e-6);
    assert!(sp["nondegeneracy_verdict"]["nondegenerate"].as_bool().unwrap());

    let corr = json(&out.join("corrector.json"));
    assert!((corr["c"][0].as_f64().unwrap() - 14.0 / 3.0).abs() < 1e-12);

    let runlog = blowup_lab::io::read_run_csv(&out.join("run.csv")).unwrap();
    assert_eq!(runlog.records.len(), 41);
    assert!(runlog.records.windows(2).all(|w| w[1].s > w[0].s));
    // Too short for a reconstruction, which is skipped rather than fatal.
    assert!(!out.join("reconstruction.json").exists());
    let o = run(dir.path(), KAPPA, &["reconstruct"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn same_seed_gives_identical_files() {
    let cfg = format!("{KAPPA}perturbation = 1e-5\n");
    let mut bytes = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        for cmd in ["profile", "simulate"] {
            assert!(run(dir.path(), &cfg, &["--seed", "5", cmd]).status.success());
        }
        bytes.push(fs::read(dir.path().join("out/run.csv")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn config_errors_exit_64_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), "p = 7\n[spectrum]\ncount = eight\n", &["profile"]);
    assert_eq!(o.status.code(), Some(64));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn missing_profile_exits_6() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["spectrum", "corrector", "simulate"] {
        assert_eq!(run(dir.path(), "", &[cmd]).status.code(), Some(6), "{cmd}");
    }
}

#[test]
fn empty_scan_exits_5_with_log() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), "[profile]\nscan_min = 2.5\nscan_max = 3.0\nscan_points = 3\n", &["profile"]);
    assert_eq!(o.status.code(), Some(5));
    let log = fs::read_to_string(dir.path().join("out/scan_log.txt")).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("a = ")).count(), 3);
}

#[test]
fn verify_prints_the_matrix() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), "profile_kind = kappa\n", &["profile"]).status.success());
    let o = run(dir.path(), "profile_kind = kappa\n", &["verify"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{text}");
    for row in ["reconnection residual", "wronskian normalisation", "leading modulation law", "hermite orthogonality"] {
        assert!(text.lines().any(|l| l.starts_with(row) && l.contains("PASS")), "{row} missing:\n{text}");
    }
}

#[test]
fn print_defaults_parses_back() {
    let o = Command::new(env!("CARGO_BIN_EXE_blowuplab")).arg("--print-defaults").output().unwrap();
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(blowup_lab::config::Config::parse(&text).is_ok());
}
