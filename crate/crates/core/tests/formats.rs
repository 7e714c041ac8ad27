//! Output schemas and reader round trips.

use std::fs;

use blowup_lab::corrector::{solve_hierarchy, CorrectorParams};
use blowup_lab::error::LabError;
use blowup_lab::io::*;
use blowup_lab::profile_solver::Profile;
use blowup_lab::simulator::{reconstruct_physical, synthetic_series, NormTable, RunSeries, StepRecord};
use blowup_lab::spectral::{check_nondegeneracy, compute_spectrum, SpectralParams};
use serde_json::Value;

fn kappa() -> Profile {
    Profile::kappa(7.0, 15.0, 0.01).unwrap()
}

fn json_keys(path: &std::path::Path) -> Vec<String> {
    let v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v.as_object().unwrap().keys().cloned().collect()
}

fn sample_series() -> RunSeries {
    let records = (0..5)
        .map(|i| {
            let s = 50.0 + 0.1 * i as f64;
            StepRecord {
                s,
                lambda: (-s / 2.0).exp(),
                log_lambda: -s / 2.0,
                b: 1.0 / (3.0 * s) + 1e-17 * i as f64,
                bs_residual: -1.25e-9 * i as f64,
                a: vec![0.1 / (i + 1) as f64, -3e-12],
                norms: NormTable {
                    eps_h2rho: 1e-7,
                    grad_eps_l2q2rho: 2.5e-8,
                    nuk_l2: 1.0 / 3.0,
                    nuk_w1: 7e-300,
                    v_w1q: 0.1,
                    eps_l2rho: 4e-8,
                    eps_h1rho: 5e-8,
                    v_linf: 1e-6,
                    truncation: 1e-20,
                },
                energy: -1.0 - i as f64 * 1e-13,
                energy_delta: -1e-13,
                verdict: (i % 3) as u32,
                orth_defect: 1e-17,
                orth_rel: 1e-10,
                lambda_rate: -0.5 + 1.0 / (3.0 * s),
                lyap_lhs: 1e-9,
                lyap_rhs: 1e-12,
            }
        })
        .collect();
    RunSeries { mode_labels: vec!["a_-2_0".into(), "a_-2_1".into()], c1: 3.0, records }
}

#[test]
fn profile_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("profile.csv");
    let k = kappa();
    write_profile(&path, &k, WriteOptions::default()).unwrap();
    let back = read_profile(&path, 8).unwrap();
    assert_eq!(back.a, k.a);
    assert_eq!(back.phi, k.phi);
    assert_eq!(back.dphi, k.dphi);
    assert!(back.is_constant());
    let t = Table::read(&path).unwrap();
    assert_eq!(t.header, ["r", "phi", "dphi"]);
    for key in ["p", "kind", "a", "c_inf", "exponent", "h", "r_max"] {
        assert!(t.meta(key).is_some(), "missing {key}");
    }
}

#[test]
fn spectrum_json_schema() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("spectrum.json");
    let k = kappa();
    let params = SpectralParams { h: 0.01, count: 4, ..Default::default() };
    let sp = compute_spectrum(&k, &params).unwrap();
    let verdict = check_nondegeneracy(&sp, &k, params.nondegeneracy_tol).unwrap();
    let doc = SpectrumDoc::new(&sp, k.a, verdict, WriteOptions::default());
    write_spectrum_json(&path, &doc).unwrap();
    let keys = json_keys(&path);
    for key in ["format_version", "p", "a", "ell0", "eigenvalues", "M_of_j", "nondegeneracy_verdict"] {
        assert!(keys.iter().any(|k| k == key), "missing {key}");
    }
    assert!(!keys.iter().any(|k| k == "generated_unix"));
    let back = read_spectrum_json(&path).unwrap();
    assert_eq!(back.ell0, 1);
    assert_eq!(back.eigenvalues, doc.eigenvalues);
    assert_eq!(back.m_of_j, vec![ModeCount { j: -1, m: 1 }]);
    assert!(back.nondegeneracy_verdict.nondegenerate);
    // The verdict is written even with a single negative eigenvalue.
    assert!(back.nondegeneracy_verdict.deep_modes.is_empty());

    let eig = dir.path().join("eigenfunctions.csv");
    eigenfunction_table(&sp).write(&eig, WriteOptions::default()).unwrap();
    let t = Table::read(&eig).unwrap();
    assert_eq!(t.header, ["r", "psi_-1", "psi_0", "psi_1", "psi_2"]);
}

#[test]
fn corrector_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let corr = solve_hierarchy(&kappa(), None, &CorrectorParams { n: 2, ..Default::default() }).unwrap();
    let path = dir.path().join("corrector.json");
    let doc = CorrectorDoc::new(&corr, WriteOptions::default());
    write_corrector_json(&path, &doc).unwrap();
    assert_eq!(read_corrector_json(&path).unwrap(), doc);
    let keys = json_keys(&path);
    for key in ["format_version", "p", "n", "c", "d"] {
        assert!(keys.iter().any(|k| k == key), "missing {key}");
    }
    let v: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert!((v["c"][0].as_f64().unwrap() - 14.0 / 3.0).abs() < 1e-12);

    let tab = dir.path().join("corrector_v.csv");
    corrector_table(&corr).write(&tab, WriteOptions::default()).unwrap();
    let t = Table::read(&tab).unwrap();
    assert_eq!(t.header[0], "r");
    assert!(t.header.iter().all(|h| h == "r" || h.starts_with('V')));
}

#[test]
fn run_csv_round_trip_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.csv");
    let series = sample_series();
    write_run_csv(&path, &series, WriteOptions::default()).unwrap();
    assert_eq!(read_run_csv(&path).unwrap(), series);
    let t = Table::read(&path).unwrap();
    let fixed: Vec<&str> = RUN_HEAD
        .iter()
        .copied()
        .chain(["a_-2_0", "a_-2_1"])
        .chain(RUN_NORMS.iter().copied())
        .collect();
    assert_eq!(&t.header[..fixed.len()], fixed.as_slice());
}

#[test]
fn run_csv_with_only_the_fixed_columns_parses() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.csv");
    let text = "# format_version=1\n# c1=2\ns,lambda,b,bs_residual,eps_h2rho,grad_eps_l2q2rho,nuK_l2,nuK_w1,v_w1q,energy,verdict\n\
                1,0.5,0.1,0,0,0,0,0,0,-1,0\n2,0.25,0.05,0,0,0,0,0,0,-2,3\n";
    fs::write(&path, text).unwrap();
    let s = read_run_csv(&path).unwrap();
    assert!(s.mode_labels.is_empty());
    assert_eq!(s.records[1].verdict, 3);
    assert_eq!(s.records[1].log_lambda, 0.25_f64.ln());
}

#[test]
fn reconstruction_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let rec = reconstruct_physical(&synthetic_series(14.0 / 3.0, 50.0, 100.0, 0.05)).unwrap();
    let path = dir.path().join("reconstruction.json");
    let doc = ReconstructionDoc::new(&rec, WriteOptions::default());
    write_reconstruction_json(&path, &doc).unwrap();
    assert_eq!(read_reconstruction_json(&path).unwrap(), doc);
    let mut keys = json_keys(&path);
    keys.sort();
    assert_eq!(keys, ["T", "c_star", "fit_residual", "format_version", "window"]);

    let fb = dir.path().join("free_boundary.csv");
    free_boundary_table(&rec).write(&fb, WriteOptions::default()).unwrap();
    let t = Table::read(&fb).unwrap();
    assert_eq!(t.header, ["s", "t", "T_minus_t", "sqrt_abs_log", "inv_sqrt_b"]);
    assert_eq!(t.rows.len(), rec.s.len());
}

#[test]
fn version_and_columns_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("x.csv");
    fs::write(&csv_path, "# format_version=2\na\n1\n").unwrap();
    assert!(matches!(Table::read(&csv_path), Err(LabError::Format(_))));
    fs::write(&csv_path, "a\n1\n").unwrap();
    assert!(matches!(Table::read(&csv_path), Err(LabError::Format(_))));
    fs::write(&csv_path, "# format_version=1\n# c1=1\ns,lambda\n1,2\n").unwrap();
    assert!(matches!(read_run_csv(&csv_path), Err(LabError::Format(_))));

    let json_path = dir.path().join("x.json");
    fs::write(&json_path, r#"{"format_version": 9, "T": 1, "c_star": 1, "fit_residual": 0, "window": [0, 1]}"#).unwrap();
    assert!(matches!(read_reconstruction_json(&json_path), Err(LabError::Format(_))));
    fs::write(&json_path, r#"{"T": 1, "c_star": 1, "fit_residual": 0, "window": [0, 1]}"#).unwrap();
    assert!(matches!(read_reconstruction_json(&json_path), Err(LabError::Format(_))));
}

#[test]
fn output_is_byte_identical_without_timestamp() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let series = sample_series();
    write_run_csv(&a, &series, WriteOptions::default()).unwrap();
    write_run_csv(&b, &series, WriteOptions::default()).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    write_run_csv(&b, &series, WriteOptions { timestamp: true }).unwrap();
    let text = fs::read_to_string(&b).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("# generated_unix="));
    assert_eq!(read_run_csv(&b).unwrap(), series);
}
