//! End-to-end tests of the `cbm-audit` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cbm_audit::io::load_population;
use cbm_audit::trial::ate;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbm-audit"))
        .args(args)
        .current_dir(dir)
        .env_remove("CBM_AUDIT_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn planted_pipeline_matches_exact_xi() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "gen", "--n", "12", "--seed", "5", "--kind", "planted", "--out", "pop.csv",
        ],
    );
    assert!(d.join("pop.planted.json").exists());
    for direction in ["max", "min"] {
        ok(
            d,
            &[
                "frontier",
                "--pop",
                "pop.csv",
                "--direction",
                direction,
                "--out",
                &format!("{direction}.csv"),
                "--json-out",
                &format!("{direction}.json"),
            ],
        );
    }
    ok(
        d,
        &[
            "xi",
            "--pop",
            "pop.csv",
            "--frontier",
            "max.json",
            "min.json",
            "--out",
            "xi.json",
        ],
    );
    let report = read_json(&d.join("xi.json"));
    let xi = report["xi"].as_f64().unwrap();
    let exact = report["exact"]["xi"].as_f64().unwrap();
    assert!(
        (xi - exact).abs() <= 1e-9 * exact.abs().max(1.0),
        "xi {xi} vs exact {exact}"
    );
    assert_eq!(report["manifest"], "xi.json.manifest.json");
}

#[test]
fn mate_prints_a_single_number() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--n", "20", "--seed", "1", "--out", "pop.csv"]);
    ok(
        d,
        &[
            "assign", "--pop", "pop.csv", "--seed", "3", "--out", "a.txt",
        ],
    );
    let out = ok(d, &["mate", "--pop", "pop.csv", "--assignment", "a.txt"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.trim().parse::<f64>().unwrap().is_finite());
}

#[test]
fn frontier_csv_has_header_and_ascending_lambdas() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--n", "16", "--seed", "2", "--out", "pop.csv"]);
    ok(
        d,
        &[
            "frontier",
            "--pop",
            "pop.csv",
            "--lambdas",
            "0,0.5,2,8",
            "--out",
            "f.csv",
        ],
    );
    let text = fs::read_to_string(d.join("f.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("lambda,u,mate,status"));
    let lambdas: Vec<f64> = lines
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    // repeated assignments collapse to one row
    assert!(!lambdas.is_empty());
    assert!(lambdas.iter().all(|l| [0.0, 0.5, 2.0, 8.0].contains(l)));
    assert!(lambdas.windows(2).all(|w| w[0] < w[1]));
    assert!(d.join("f.csv.manifest.json").exists());
}

#[test]
fn malformed_csv_reports_row_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--n", "10", "--seed", "4", "--out", "pop.csv"]);
    ok(d, &["assign", "--n", "10", "--out", "a.txt"]);
    let text = fs::read_to_string(d.join("pop.csv")).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut fields: Vec<&str> = lines[3].split(',').collect();
    fields[1] = "abc";
    lines[3] = fields.join(",");
    fs::write(d.join("bad.csv"), lines.join("\n") + "\n").unwrap();
    let out = run(d, &["mate", "--pop", "bad.csv", "--assignment", "a.txt"]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["row"], 4);
    assert_eq!(err["column"], "x1");
    assert_eq!(err["exit_code"], 2);
}

#[test]
fn exhausted_budget_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--n", "24", "--seed", "1", "--out", "pop.csv"]);
    let out = run(
        d,
        &[
            "frontier",
            "--pop",
            "pop.csv",
            "--node-budget",
            "1",
            "--lambdas",
            "0,1",
            "--out",
            "f.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    let text = fs::read_to_string(d.join("f.csv")).unwrap();
    assert!(text
        .lines()
        .skip(1)
        .all(|l| l.ends_with(",budget_exceeded")));
    let manifest = read_json(&d.join("f.csv.manifest.json"));
    assert_eq!(manifest["budget_exceeded"], true);

    let out = run(
        d,
        &[
            "frontier",
            "--pop",
            "pop.csv",
            "--node-budget",
            "1",
            "--no-heuristic",
            "--lambdas",
            "0",
            "--out",
            "g.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn reference_cloud_is_centred_on_the_ate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--n", "30", "--seed", "8", "--out", "pop.csv"]);
    ok(
        d,
        &[
            "reference",
            "--pop",
            "pop.csv",
            "--draws",
            "10000",
            "--seed",
            "9",
            "--out",
            "cloud.csv",
        ],
    );
    let text = fs::read_to_string(d.join("cloud.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("u,mate"));
    let mates: Vec<f64> = lines
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(mates.len(), 10_000);
    let n = mates.len() as f64;
    let mean = mates.iter().sum::<f64>() / n;
    let sd = (mates.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let truth = ate(&load_population(&d.join("pop.csv"), None).unwrap());
    assert!(
        (mean - truth).abs() < 4.0 * sd / n.sqrt(),
        "mean {mean}, ate {truth}, sd {sd}"
    );
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--n", "20", "--seed", "6", "--out", "pop.csv"]);
    for threads in ["1", "3"] {
        ok(
            d,
            &[
                "--threads",
                threads,
                "frontier",
                "--pop",
                "pop.csv",
                "--lambdas",
                "0,1,4,16",
                "--out",
                &format!("f{threads}.csv"),
            ],
        );
        ok(
            d,
            &[
                "--threads",
                threads,
                "sigma",
                "--pop",
                "pop.csv",
                "--draws",
                "2000",
                "--out",
                &format!("s{threads}.json"),
            ],
        );
    }
    assert_eq!(
        fs::read(d.join("f1.csv")).unwrap(),
        fs::read(d.join("f3.csv")).unwrap()
    );
    let s1 = read_json(&d.join("s1.json"));
    let s3 = read_json(&d.join("s3.json"));
    assert!(s1["sigma"].is_number());
    assert_eq!(s1["sigma"], s3["sigma"]);
}

#[test]
fn replay_reproduces_outputs_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--n", "14", "--seed", "3", "--out", "pop.csv"]);
    ok(
        d,
        &[
            "frontier",
            "--pop",
            "pop.csv",
            "--lambdas",
            "0,2",
            "--out",
            "f.csv",
        ],
    );
    let out = ok(d, &["replay", "f.csv.manifest.json"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["identical"], true);

    let manifest_path = d.join("f.csv.manifest.json");
    let mut manifest = read_json(&manifest_path);
    assert!(manifest["outputs"]["f.csv"].is_string());
    manifest["outputs"]["f.csv"] = "0".repeat(64).into();
    fs::write(&manifest_path, serde_json::to_string(&manifest).unwrap()).unwrap();
    let out = run(d, &["replay", "f.csv.manifest.json"]);
    assert_eq!(out.status.code(), Some(4));
}
