use std::path::Path;
use std::process::{Command, Output};

use chrono::Datelike;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spatial-fclust"))
        .args(args)
        .output()
        .unwrap()
}

fn text(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn simulate_ingest_fit_score() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let out = run(&[
        "simulate",
        "--out-dir",
        &s(&sim),
        "--seed",
        "2",
        "--set",
        "sim.n_sites=120",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "observations.csv",
        "geometry.csv",
        "curves.csv",
        "truth_labels.csv",
        "truth_params.txt",
        "run.conf",
    ] {
        assert!(sim.join(f).exists(), "{f} missing");
    }

    // the generated config ingests and fits the simulated files unchanged
    let conf = s(&sim.join("run.conf"));
    let out = run(&["ingest", "--config", &conf]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = String::from_utf8(out.stdout).unwrap();
    assert!(report.contains("sites retained: 120"), "{report}");
    assert!(report.contains("missing days: 0.00%"), "{report}");

    let run_dir = sim.join("run");
    let out = run(&[
        "fit",
        "--config",
        &conf,
        "--curves",
        &s(&run_dir.join("curves.csv")),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let assignments = text(&run_dir.join("assignments.csv"));
    assert!(assignments.contains("\nsite_id,cluster,posterior_1,posterior_2,posterior_3\n"));
    assert_eq!(
        assignments.lines().filter(|l| !l.starts_with('#')).count(),
        121
    );

    let geo: serde_json::Value =
        serde_json::from_str(&text(&run_dir.join("clusters.geojson"))).unwrap();
    assert_eq!(geo["type"], "FeatureCollection");
    assert_eq!(geo["features"].as_array().unwrap().len(), 120);
    assert!(geo["provenance"]["config_sha256"].as_str().unwrap().len() == 64);
    let props = &geo["features"][0]["properties"];
    assert!(
        props["site_id"].is_string()
            && props["cluster"].is_u64()
            && props["posterior_max"].is_f64()
    );

    let out = run(&[
        "score",
        "--assignments",
        &s(&run_dir.join("assignments.csv")),
        "--truth",
        &s(&sim.join("truth_labels.csv")),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let report = String::from_utf8(out.stdout).unwrap();
    let ari: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("adjusted_rand_index: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(ari > 0.9, "{report}");
}

#[test]
fn outputs_carry_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "simulate",
        "--out-dir",
        &s(dir.path()),
        "--seed",
        "17",
        "--set",
        "sim.n_sites=30",
    ]);
    assert_eq!(out.status.code(), Some(0));
    for f in [
        "observations.csv",
        "geometry.csv",
        "curves.csv",
        "truth_labels.csv",
        "truth_params.txt",
    ] {
        let t = text(&dir.path().join(f));
        assert!(t.contains("# config_sha256 = "), "{f}");
        assert!(t.contains("# seed = 17"), "{f}");
    }
}

#[test]
fn unknown_key_is_a_validation_failure() {
    let out = run(&["simulate", "--set", "sim.nsites=5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}

#[test]
fn hitting_max_iter_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    assert_eq!(
        run(&["simulate", "--out-dir", &s(&sim), "--set", "sim.n_sites=60"])
            .status
            .code(),
        Some(0)
    );
    let out = run(&[
        "fit",
        "--curves",
        &s(&sim.join("curves.csv")),
        "--geometry",
        &s(&sim.join("geometry.csv")),
        "--out-dir",
        &s(&dir.path().join("fit")),
        "--set",
        "fit.max_iter=1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(dir.path().join("fit/assignments.csv").exists());
}

#[test]
fn selection_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    assert_eq!(
        run(&["simulate", "--out-dir", &s(&sim), "--set", "sim.n_sites=80"])
            .status
            .code(),
        Some(0)
    );
    let fit = dir.path().join("fit");
    let out = run(&[
        "fit",
        "--curves",
        &s(&sim.join("curves.csv")),
        "--geometry",
        &s(&sim.join("geometry.csv")),
        "--out-dir",
        &s(&fit),
        "--clusters",
        "2,3,4",
        "--set",
        "fit.restarts=2",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let sel = text(&fit.join("selection.csv"));
    let rows: Vec<&str> = sel.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(
        rows[0],
        "clusters,pseudo_bic,objective,converged,iterations"
    );
    assert_eq!(rows.len(), 4);
}

#[test]
fn score_rejects_mismatched_sites() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    std::fs::write(&a, "site_id,cluster\nx,1\ny,2\n").unwrap();
    std::fs::write(&b, "site_id,cluster\nx,1\nz,2\n").unwrap();
    let out = run(&["score", "--assignments", &s(&a), "--truth", &s(&b)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("only in assignments: [y]") && err.contains("only in truth: [z]"),
        "{err}"
    );
}

#[test]
fn ingest_reports_dropped_sites() {
    let dir = tempfile::tempdir().unwrap();
    let obs = dir.path().join("obs.csv");
    let geo = dir.path().join("geo.csv");
    let mut rows = String::from("site_id,date,value\n");
    let mut d = chrono::NaiveDate::from_ymd_opt(2001, 1, 1).unwrap();
    while d.year() == 2001 {
        rows.push_str(&format!("full,{d},1.5\n"));
        if d.ordinal() != 40 {
            rows.push_str(&format!("gappy,{d},2.0\n"));
        } else {
            rows.push_str(&format!("gappy,{d},\n"));
        }
        d = d.succ_opt().unwrap();
    }
    std::fs::write(&obs, rows).unwrap();
    std::fs::write(
        &geo,
        "site_id,lat,lon,elev_m\nfull,30,100,10\ngappy,31,101,20\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "ingest",
        "--observations",
        &s(&obs),
        "--geometry",
        &s(&geo),
        "--out-dir",
        &s(&out_dir),
        "--set",
        "ingest.min_complete_years=1",
        "--set",
        "ingest.year_start=2001",
        "--set",
        "ingest.year_end=2001",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = text(&out_dir.join("ingest_report.txt"));
    assert!(report.contains("sites retained: 1"), "{report}");
    assert!(report.contains("dropped gappy"), "{report}");
    // one missing day out of 730
    assert!(report.contains("missing days: 0.14%"), "{report}");
}
