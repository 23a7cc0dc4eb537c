mod common;

use common::*;
use tiltfuse::SimConfig;

fn small() -> SimConfig {
    SimConfig {
        n: 500,
        seed: 21,
        ..SimConfig::default()
    }
}

/// Selection probability 1/2 for every row: both studies are simple
/// random samples of the population.
fn homogeneous() -> SimConfig {
    SimConfig {
        zeta0: 0.0,
        zeta_x: vec![0.0; 3],
        zeta_z: vec![0.0; 3],
        zeta_c: vec![0.0; 2],
        n: 2000,
        seed: 3,
        ..SimConfig::default()
    }
}

#[test]
fn estimate_writes_report_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let f = write_fixture(dir.path(), &small(), 0);
    let out = dir.path().join("out");
    let o = run(&fit_args("estimate", &f, &out, 1, &[]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&out.join("result.json"));
    assert_eq!(r["method"], "W");
    assert_eq!(r["coefficients"].as_array().unwrap().len(), 9);
    assert_eq!(r["candidates_x"].as_array().unwrap().len(), 2);
    assert!(r["covariance"].is_null());
    let m = read_json(&out.join("manifest.json"));
    assert_eq!(m["job"]["command"], "estimate");
    assert_eq!(m["outputs"][0], "result.json");
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("odds ratio"));
}

#[test]
fn single_candidate_reports_odds_ratio_intervals() {
    let dir = tempfile::tempdir().unwrap();
    let f = write_fixture(dir.path(), &small(), 1);
    let out = dir.path().join("out");
    let o = run(&fit_args("estimate", &f, &out, 1, &["--tilt-candidates", "additive"]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&out.join("result.json"));
    assert_eq!(r["covariance"]["source"], "sandwich");
    assert_eq!(r["covariance"]["dims"][1], 6);
    for c in r["coefficients"].as_array().unwrap() {
        let cell = c["odds_ratio_ci"].as_str().unwrap();
        let (or, rest) = cell.split_once(" (").unwrap();
        let (lo, hi) = rest.trim_end_matches(')').split_once(',').unwrap();
        for part in [or, lo, hi] {
            let (_, dec) = part.split_once('.').unwrap();
            assert_eq!(dec.len(), 2, "{cell}");
        }
        let (or, lo, hi): (f64, f64, f64) = (or.parse().unwrap(), lo.parse().unwrap(), hi.parse().unwrap());
        assert!(lo <= or && or <= hi, "{cell}");
    }
}

#[test]
fn homogeneous_inputs_calibrated_matches_homogeneity() {
    let dir = tempfile::tempdir().unwrap();
    let f = write_fixture(dir.path(), &homogeneous(), 0);
    let w = dir.path().join("w");
    let nw = dir.path().join("nw");
    let o = run(&fit_args("estimate", &f, &w, 1, &["--tilt-candidates", "additive"]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&fit_args("estimate", &f, &nw, 1, &["--mode", "homogeneity"]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let w = read_json(&w.join("result.json"));
    let nw = read_json(&nw.join("result.json"));
    assert_eq!(nw["method"], "NW");
    for (a, b) in w["coefficients"]
        .as_array()
        .unwrap()
        .iter()
        .zip(nw["coefficients"].as_array().unwrap())
    {
        let diff = (a["estimate"].as_f64().unwrap() - b["estimate"].as_f64().unwrap()).abs();
        let se = b["std_error"].as_f64().unwrap();
        assert!(diff < se, "{}: {diff} vs se {se}", a["name"]);
    }
}

#[test]
fn known_weights_mode_reads_weight_files() {
    let dir = tempfile::tempdir().unwrap();
    let f = write_fixture(dir.path(), &small(), 2);
    let wpath = dir.path().join("ones.csv");
    let mut text = "weight\n".to_string();
    for _ in 0..500 {
        text += "1\n";
    }
    std::fs::write(&wpath, text).unwrap();
    let wp = wpath.display().to_string();
    let tw = dir.path().join("tw");
    let o = run(&fit_args(
        "estimate",
        &f,
        &tw,
        1,
        &["--mode", "known_weights", "--weights-x", &wp, "--weights-z", &wp],
    ));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let nw = dir.path().join("nw");
    run(&fit_args("estimate", &f, &nw, 1, &["--mode", "homogeneity"]));
    let a = read_json(&tw.join("result.json"));
    let b = read_json(&nw.join("result.json"));
    assert_eq!(a["method"], "TW");
    for (x, y) in a["coefficients"]
        .as_array()
        .unwrap()
        .iter()
        .zip(b["coefficients"].as_array().unwrap())
    {
        assert!((x["estimate"].as_f64().unwrap() - y["estimate"].as_f64().unwrap()).abs() < 1e-6);
    }
    let o = run(&fit_args("estimate", &f, &tw, 1, &["--mode", "known_weights"]));
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_summary_exits_4_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut f = write_fixture(dir.path(), &small(), 0);
    f.summary_z = dir.path().join("nowhere.json");
    let o = run(&fit_args("estimate", &f, &dir.path().join("out"), 1, &[]));
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere.json"));
}

#[test]
fn missing_panel_column_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let f = write_fixture(dir.path(), &small(), 0);
    let mut args = fit_args("estimate", &f, &dir.path().join("out"), 1, &[]);
    let i = args.iter().position(|a| a == "x1,x2,x3").unwrap();
    args[i] = "x1,x2,x9".into();
    let o = run(&args);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("x9"));
}

#[test]
fn unknown_tilt_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let f = write_fixture(dir.path(), &small(), 0);
    let o = run(&fit_args(
        "estimate",
        &f,
        &dir.path().join("out"),
        1,
        &["--tilt-candidates", "additive,quadratic"],
    ));
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("additive_with_interactions"));
}

#[test]
fn bootstrap_is_reproducible_and_rejects_one_replicate() {
    let dir = tempfile::tempdir().unwrap();
    let f = write_fixture(dir.path(), &small(), 0);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let extra = ["--bootstrap-reps", "10", "--tilt-candidates", "additive"];
    let o = run(&fit_args("bootstrap", &f, &a, 9, &extra));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    run(&fit_args("bootstrap", &f, &b, 9, &extra));
    let ca = std::fs::read(a.join("bootstrap.csv")).unwrap();
    assert_eq!(ca, std::fs::read(b.join("bootstrap.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&ca).lines().count(), 11);
    let r = read_json(&a.join("bootstrap.json"));
    assert_eq!(r["reps"], 10);
    let o = run(&fit_args("bootstrap", &f, &a, 9, &["--bootstrap-reps", "1"]));
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_scenario_lists_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["simulate", "--scenario", "bogus", "--seed", "1", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("additive, additive_interaction, full"), "{err}");
}

#[test]
fn missing_seed_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().args(["simulate", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn simulate_and_replay_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let o = bin()
        .args([
            "simulate",
            "--n",
            "300",
            "--replicates",
            "3",
            "--seed",
            "7",
            "--threads",
            "1",
            "--out",
        ])
        .arg(&out)
        .output()
        .unwrap();
    assert!(matches!(code(&o), 0 | 3), "{}", String::from_utf8_lossy(&o.stderr));
    let s = read_json(&out.join("sim_summary.json"));
    assert_eq!(s["replicates"], 3);
    assert_eq!(s["methods"].as_array().unwrap().len(), 3);
    let again = dir.path().join("again");
    bin()
        .arg("replay")
        .arg(out.join("manifest.json"))
        .arg("--out")
        .arg(&again)
        .output()
        .unwrap();
    for name in ["sim_summary.json", "sim_replicates.csv", "manifest.json"] {
        assert_eq!(
            std::fs::read(out.join(name)).unwrap(),
            std::fs::read(again.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn case_control_simulation_flag_parses() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cc");
    let o = bin()
        .args([
            "simulate",
            "--design",
            "case-control-study2",
            "--n",
            "400",
            "--replicates",
            "2",
            "--seed",
            "3",
            "--out",
        ])
        .arg(&out)
        .output()
        .unwrap();
    assert!(matches!(code(&o), 0 | 3), "{}", String::from_utf8_lossy(&o.stderr));
    let s = read_json(&out.join("sim_summary.json"));
    assert_eq!(s["config"]["design"], "case_control_study2");
}
