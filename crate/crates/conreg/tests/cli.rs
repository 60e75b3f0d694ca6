//! End-to-end tests of the command-line interface, run against the
//! compiled binary.

use std::path::Path;
use std::process::{Command, Output};

use conreg::density::Warp1D;
use conreg::geometry::Grid1D;
use conreg::io;
use conreg::register::invert_warp;
use conreg::simulate::l2_warp_error;

fn conreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conreg"))
        .args(args)
        .output()
        .expect("failed to launch binary")
}

fn small_sim_config(dir: &Path) -> String {
    // a reduced endpoint count keeps the kernel density estimates fast;
    // the component shapes match the full generator
    let cfg = serde_json::json!({
        "subjects": 3,
        "seed": 42,
        "endpoints": {
            "parcels": 200,
            "components": [
                {"pairs": 400, "mean1": 0.1, "mean2": 0.9, "variance": 0.5},
                {"pairs": 400, "mean1": 0.5, "mean2": 0.6, "variance": 0.4},
                {"pairs": 1200, "mean1": 0.55, "mean2": 0.95, "variance": 0.3}
            ]
        }
    });
    let path = dir.join("sim.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.display().to_string()
}

#[test]
fn simulate_is_reproducible_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_sim_config(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let res = conreg(&["simulate", "--config", &cfg, "-o", out.to_str().unwrap()]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    for name in ["subject_00.csv", "true_warp_02.csv", "manifest.json"] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    // outputs are readable through the library
    let f = io::read_density(&out_a.join("subject_01.csv")).unwrap();
    assert!((f.integral() - 1.0).abs() < 1e-6);
    io::read_warp_1d(&out_a.join("true_warp_01.csv")).unwrap();
}

#[test]
fn register_self_yields_identity_warp() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_sim_config(dir.path());
    let sim = dir.path().join("sim");
    let res = conreg(&["simulate", "--config", &cfg, "-o", sim.to_str().unwrap()]);
    assert!(res.status.success());
    let subject = sim.join("subject_00.csv");
    let out = dir.path().join("reg");
    let res = conreg(&[
        "register",
        "-i",
        subject.to_str().unwrap(),
        "-i",
        subject.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let warp = io::read_warp_1d(&out.join("warp.csv")).unwrap();
    let identity = Warp1D::identity(warp.grid().clone());
    assert!(l2_warp_error(&warp, &identity).unwrap() < 1e-3);
    // diagnostics artifacts exist and the trace is non-increasing
    let trace = io::read_cost_trace_csv(&out.join("cost_trace.csv")).unwrap();
    assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    let diag = io::read_diagnostics(&out.join("diagnostics.json")).unwrap();
    assert_eq!(diag.cost_trace.len(), trace.len());
    assert!(out.join("cost_trace.svg").exists());
}

#[test]
fn register_recovers_a_simulated_warp() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_sim_config(dir.path());
    let sim = dir.path().join("sim");
    let res = conreg(&["simulate", "--config", &cfg, "-o", sim.to_str().unwrap()]);
    assert!(res.status.success());
    // the observed density of subject 0 is its base density pushed through
    // the stored true warp, so registering base onto observed (with the
    // warp applied on the moving input) recovers the warp up to inversion;
    // here we instead warp one simulated density ourselves for a clean truth
    let f = io::read_density(&sim.join("subject_00.csv")).unwrap();
    let grid = Grid1D::uniform(f.values().size()).unwrap();
    let truth = Warp1D::from_knots(grid, &[0.0, 0.4, 1.0], &[0.0, 0.55, 1.0]).unwrap();
    let warped = conreg::density::warp_density_1d(&f, &truth).unwrap();
    let moving = dir.path().join("moving.csv");
    io::write_density(&warped, &moving).unwrap();
    let out = dir.path().join("reg");
    let res = conreg(&[
        "register",
        "-i",
        sim.join("subject_00.csv").to_str().unwrap(),
        "-i",
        moving.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let estimated = io::read_warp_1d(&out.join("warp.csv")).unwrap();
    let recovered = invert_warp(&estimated).unwrap();
    let err = l2_warp_error(&truth, &recovered).unwrap();
    assert!(err <= 0.1, "recovery error {err}");
}

#[test]
fn register_runs_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_sim_config(dir.path());
    let sim = dir.path().join("sim");
    assert!(conreg(&["simulate", "--config", &cfg, "-o", sim.to_str().unwrap()])
        .status
        .success());
    let a = dir.path().join("ra");
    let b = dir.path().join("rb");
    for out in [&a, &b] {
        let res = conreg(&[
            "register",
            "-i",
            sim.join("subject_00.csv").to_str().unwrap(),
            "-i",
            sim.join("subject_01.csv").to_str().unwrap(),
            "-o",
            out.to_str().unwrap(),
            "--max-iters",
            "120",
        ]);
        assert!(res.status.success());
    }
    for name in ["warp.csv", "cost_trace.csv", "diagnostics.json"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_sim_config(dir.path());
    // config says 3 subjects; the flag reduces it to 1
    let out = dir.path().join("one");
    let res = conreg(&[
        "simulate",
        "--config",
        &cfg,
        "--subjects",
        "1",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    assert!(out.join("subject_00.csv").exists());
    assert!(!out.join("subject_01.csv").exists());
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"subjects": 2, "sujbects": 3}"#).unwrap();
    let res = conreg(&["simulate", "--config", path.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(4), "config parse failures are I/O-class");
    assert!(String::from_utf8_lossy(&res.stderr).contains("sujbects"));
}

#[test]
fn missing_input_is_an_io_error() {
    let res = conreg(&["register", "-i", "/no/such/file.csv", "-i", "/no/such/other.csv"]);
    assert_eq!(res.status.code(), Some(4));
}

#[test]
fn bad_domain_selector_is_a_validation_error() {
    let res = conreg(&["simulate", "--domain", "klein-bottle"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn evaluate_reports_and_asserts_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let grid = Grid1D::uniform(200).unwrap();
    // pick a truth warp whose distance from the identity sits inside the
    // population band the assertion expects
    let identity = Warp1D::identity(grid.clone());
    let mut truth = None;
    for mid in [0.10, 0.13, 0.16, 0.20, 0.24, 0.28, 0.32, 0.36] {
        let w = Warp1D::from_knots(grid.clone(), &[0.0, 0.5, 1.0], &[0.0, mid, 1.0]).unwrap();
        let b = l2_warp_error(&w, &identity).unwrap();
        if (0.19..=0.29).contains(&b) {
            truth = Some(w);
            break;
        }
    }
    let truth = truth.expect("no candidate warp in the magnitude band");
    let truth_path = dir.path().join("truth.csv");
    let id_path = dir.path().join("id.csv");
    io::write_warp_1d(&truth, &truth_path).unwrap();
    io::write_warp_1d(&identity, &id_path).unwrap();

    // perfect estimate: thresholds met, exit 0, summary files written
    let out = dir.path().join("ok");
    let res = conreg(&[
        "evaluate",
        "-i",
        truth_path.to_str().unwrap(),
        "-i",
        truth_path.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
        "--assert",
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let summary = std::fs::read_to_string(out.join("evaluation.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(parsed["mean_recovery"].as_f64().unwrap(), 0.0);
    assert!(out.join("evaluation.csv").exists());

    // identity estimate: recovery error equals the magnitude, assertion fails
    let out_bad = dir.path().join("bad");
    let res = conreg(&[
        "evaluate",
        "-i",
        id_path.to_str().unwrap(),
        "-i",
        truth_path.to_str().unwrap(),
        "-o",
        out_bad.to_str().unwrap(),
        "--assert",
    ]);
    assert_eq!(res.status.code(), Some(3));

    // without --assert the same comparison succeeds
    let out_noassert = dir.path().join("plain");
    let res = conreg(&[
        "evaluate",
        "-i",
        id_path.to_str().unwrap(),
        "-i",
        truth_path.to_str().unwrap(),
        "-o",
        out_noassert.to_str().unwrap(),
    ]);
    assert!(res.status.success());
}

#[test]
fn evaluate_rejects_odd_input_counts() {
    let dir = tempfile::tempdir().unwrap();
    let grid = Grid1D::uniform(50).unwrap();
    let path = dir.path().join("w.csv");
    io::write_warp_1d(&Warp1D::identity(grid), &path).unwrap();
    let res = conreg(&["evaluate", "-i", path.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}
