use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn adscale(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adscale"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const BASE: &str = r#"{ "kind": "mlp", "layers": [3328, 1024, 256, 256, 256, 1], "user_dim": 1664, "ad_dim": 1664 }"#;

/// The documented metric examples, one impression each, plus a perfectly
/// ordered slate.
const THREE_IMPRESSIONS: &str = r#"{"id":"a","ads":[{"v":4,"ecpm":5.0,"score":0.9},{"v":3,"ecpm":3.0,"score":0.1},{"v":2,"ecpm":2.0,"score":0.8},{"v":1,"ecpm":0.0,"score":0.2}]}
{"id":"b","ads":[{"v":3,"ecpm":3.0,"score":0.9},{"v":1,"ecpm":1.0,"score":0.8},{"v":2,"ecpm":2.0,"score":0.1}]}
{"id":"c","ads":[{"v":3,"ecpm":1.0,"score":3.0},{"v":2,"ecpm":1.0,"score":2.0},{"v":1,"ecpm":1.0,"score":1.0}]}
"#;

#[test]
fn metrics_pipeline_matches_documented_examples() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "three.jsonl", THREE_IMPRESSIONS);
    let cfg = write(
        dir.path(),
        "p.toml",
        r#"
seed = 1
[[stage]]
kind = "metrics"
input = "three.jsonl"
m = 2
k = 2
output = "metrics.json"
csv_output = "metrics.csv"
"#,
    );
    let out = dir.path().join("out");
    let o = adscale(&["pipeline", "--config", s(&cfg), "--out-dir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let report: Value =
        serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    let row = |id: &str| {
        report["per_impression"]
            .as_array()
            .unwrap()
            .iter()
            .find(|r| r["id"] == id)
            .unwrap()
            .clone()
    };
    let f = |v: &Value| v.as_f64().unwrap();

    let a = row("a");
    assert_eq!(f(&a["r_over_rstar"]), 0.875);
    assert_eq!(f(&a["recall"]), 0.5);

    let b = row("b");
    let ndcg = (3.0 + 1.0 / 3f64.log2()) / (3.0 + 2.0 / 3f64.log2());
    assert!((f(&b["ndcg"]) - ndcg).abs() < 1e-12);
    assert!((f(&b["ndcg"]) - 0.85196).abs() < 1e-5);
    assert!((f(&b["opa"]) - 2.0 / 3.0).abs() < 1e-12);

    let c = row("c");
    for k in ["r_over_rstar", "ndcg", "recall", "opa"] {
        assert_eq!(f(&c[k]), 1.0, "{k}");
    }

    let sum = &report["summary"];
    let per: Vec<f64> = ["a", "b", "c"]
        .iter()
        .map(|i| f(&row(i)["r_over_rstar"]))
        .collect();
    assert!((f(&sum["r_over_rstar"]) - per.iter().sum::<f64>() / 3.0).abs() < 1e-15);
    assert_eq!(sum["n"], 3);
    assert_eq!(sum["skipped"], 0);

    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(
        csv.starts_with("r_over_rstar,ndcg,recall,opa,skipped,n\n"),
        "{csv}"
    );
}

#[test]
fn metrics_subcommand_agrees_with_pipeline_stage() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "three.jsonl", THREE_IMPRESSIONS);
    let o = adscale(&["metrics", "--input", s(&data), "--m", "2", "--k", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(
        report["per_impression"][0]["r_over_rstar"].as_f64(),
        Some(0.875)
    );
}

#[test]
fn missing_input_is_a_config_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "p.toml",
        r#"
seed = 1
[[stage]]
kind = "metrics"
input = "nowhere/impressions.jsonl"
m = 2
output = "metrics.json"
"#,
    );
    let out = dir.path().join("out");
    let o = adscale(&["pipeline", "--config", s(&cfg), "--out-dir", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(
        stderr(&o).contains("nowhere/impressions.jsonl"),
        "{}",
        stderr(&o)
    );
    assert!(!out.exists(), "nothing runs when preflight fails");
}

#[test]
fn failed_stage_rolls_back_and_records_the_failure() {
    let dir = tempfile::tempdir().unwrap();
    // A valid file that fails validation: duplicate ground-truth positions.
    write(
        dir.path(),
        "bad.jsonl",
        r#"{"id":"x","ads":[{"v":1,"ecpm":1.0,"score":0.5},{"v":1,"ecpm":2.0,"score":0.1}]}
"#,
    );
    let cfg = write(
        dir.path(),
        "p.toml",
        r#"
seed = 3
[[stage]]
kind = "fit_revenue"
points = [[0.0, 1.0], [1.0, 3.0]]
output = "g.json"

[[stage]]
kind = "metrics"
input = "bad.jsonl"
m = 1
output = "metrics.json"

[[stage]]
kind = "emit_curve"
bnsl = "g.json"
revenue_map = "g.json"
lo = 1.0
hi = 2.0
n = 2
output = "curve.csv"
"#,
    );
    let out = dir.path().join("out");
    let o = adscale(&["pipeline", "--config", s(&cfg), "--out-dir", s(&out)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(
        !out.join("g.json").exists(),
        "earlier artifacts are removed"
    );
    assert!(!out.join("metrics.json").exists());
    let m: Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["status"], "failed");
    assert_eq!(m["failure"]["stage"], 1);
    assert_eq!(m["failure"]["kind"], "metrics");
    assert_eq!(m["failure"]["exit_code"], 3);
    let statuses: Vec<&str> = m["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["status"].as_str().unwrap())
        .collect();
    assert_eq!(statuses, ["ok", "failed", "skipped"]);
    assert_eq!(m["artifacts"].as_array().unwrap().len(), 0);
}

#[test]
fn small_pipeline_is_byte_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "p.toml",
        r#"
seed = 11
[[stage]]
kind = "synth"
n_impressions = 200
ads_per_impression = 20
ecpm = { kind = "uniform", lo = 0.5, hi = 3.0 }
noise = { kind = "fixed", sigma = 0.5 }
output = "data/imps.jsonl"

[[stage]]
kind = "metrics"
input = "data/imps.jsonl"
m = 3
output = "metrics.json"

[[stage]]
kind = "arf_eval"
input = "data/imps.jsonl"
m = 3
k = 5
tau = 2.0
output = "arf.csv"
"#,
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(
        code(&adscale(&[
            "pipeline",
            "--config",
            s(&cfg),
            "--out-dir",
            s(&a),
            "--threads",
            "1"
        ])),
        0
    );
    assert_eq!(
        code(&adscale(&[
            "pipeline",
            "--config",
            s(&cfg),
            "--out-dir",
            s(&b),
            "--threads",
            "4"
        ])),
        0
    );
    for f in [
        "data/imps.jsonl",
        "metrics.json",
        "arf.csv",
        "manifest.json",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let m: Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let imps = m["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["path"] == "data/imps.jsonl")
        .unwrap();
    let bytes = fs::read(a.join("data/imps.jsonl")).unwrap();
    assert_eq!(imps["sha256"], adscale_cli::artifacts::sha256_hex(&bytes));

    // A different seed changes the data.
    let c = dir.path().join("c");
    assert_eq!(
        code(&adscale(&[
            "pipeline",
            "--config",
            s(&cfg),
            "--out-dir",
            s(&c),
            "--seed",
            "12"
        ])),
        0
    );
    assert_ne!(fs::read(c.join("data/imps.jsonl")).unwrap(), bytes);
}

#[test]
fn unknown_config_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "p.toml",
        "seed = 1\n[[stage]]\nkind = \"fit_revenue\"\npoints = [[0.0, 1.0], [1.0, 2.0]]\noutput = \"g.json\"\nslope = 3\n",
    );
    let o = adscale(&[
        "pipeline",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn outputs_may_not_escape_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "p.toml",
        "seed = 1\n[[stage]]\nkind = \"fit_revenue\"\npoints = [[0.0, 1.0], [1.0, 2.0]]\noutput = \"../g.json\"\n",
    );
    let o = adscale(&[
        "pipeline",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("g.json").exists());
}

#[test]
fn unreadable_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "broken.jsonl", "{not json}\n");
    let o = adscale(&["metrics", "--input", s(&data), "--m", "1"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let o = adscale(&[
        "metrics",
        "--input",
        s(&dir.path().join("absent.jsonl")),
        "--m",
        "1",
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn invalid_parameters_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let g = write(dir.path(), "g.json", r#"{"slope": 1.0, "intercept": 0.0}"#);
    let p = write(
        dir.path(),
        "p.json",
        r#"{"a": 0.5, "b": 0.0, "c0": 0.1, "breaks": []}"#,
    );
    let o = adscale(&[
        "emit-curve",
        "--bnsl",
        s(&p),
        "--revenue-map",
        s(&g),
        "--lo",
        "10",
        "--hi",
        "1",
        "--n",
        "5",
        "--out",
        s(&dir.path().join("c.csv")),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!dir.path().join("c.csv").exists());
}

#[test]
fn emit_curve_writes_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let g = write(dir.path(), "g.json", r#"{"slope": 2.0, "intercept": 1.0}"#);
    let p = write(
        dir.path(),
        "p.json",
        r#"{"a": 0.5, "b": 0.0, "c0": 0.1, "breaks": []}"#,
    );
    let o = adscale(&[
        "--out-dir",
        s(dir.path()),
        "emit-curve",
        "--bnsl",
        s(&p),
        "--revenue-map",
        s(&g),
        "--lo",
        "1e6",
        "--hi",
        "1e8",
        "--n",
        "2",
        "--out",
        "curve.csv",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "flops,r_over_rstar,revenue");
    assert_eq!(rows.len(), 3);
    assert!(
        rows[1].starts_with("1000000.0,0.5,2.0") || rows[1].starts_with("1000000,0.5,2"),
        "{}",
        rows[1]
    );
}

#[test]
fn infeasible_roi_floor_exits_with_code_4() {
    let dir = tempfile::tempdir().unwrap();
    let grid = write(
        dir.path(),
        "grid.json",
        &format!(r#"{{"kind": "explicit", "specs": [{BASE}]}}"#),
    );
    let bnsl = write(
        dir.path(),
        "bnsl.json",
        r#"{"a": 0.5, "b": 0.0, "c0": 0.1, "breaks": []}"#,
    );
    let g = write(
        dir.path(),
        "g.json",
        r#"{"slope": 100.0, "intercept": 0.0}"#,
    );
    let cost = write(
        dir.path(),
        "cost.json",
        &format!(
            r#"{{"t_limit": 0.05, "req0": 10.0, "base_spec": {BASE},
                "executor": {{"kind": "synthetic_latency", "alpha_lat": 0.0, "beta_lat": 1e-12}}}}"#
        ),
    );
    let plan = dir.path().join("plan.json");
    let run = |lambda: &str| {
        adscale(&[
            "optimize-roi",
            "--grid",
            s(&grid),
            "--bnsl",
            s(&bnsl),
            "--revenue-map",
            s(&g),
            "--cost",
            s(&cost),
            "--lambda",
            lambda,
            "--out",
            s(&plan),
        ])
    };
    // Revenue 50 on 10 machines: ROI 5.
    let o = run("4");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let p: Value = serde_json::from_slice(&fs::read(&plan).unwrap()).unwrap();
    assert_eq!(p["chosen"][0]["roi"].as_f64(), Some(5.0));
    let o = run("6");
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn flops_subcommand_reports_the_pair_count() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "base.json", BASE);
    let o = adscale(&["flops", "--spec", s(&spec)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let b: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(b["per_pair"], 7_602_688);
}

#[test]
fn simulate_cost_reads_a_spec_directory() {
    let dir = tempfile::tempdir().unwrap();
    let specs = dir.path().join("specs");
    fs::create_dir(&specs).unwrap();
    write(&specs, "a.json", BASE);
    write(
        &specs,
        "b.json",
        r#"{ "kind": "mlp", "layers": [3328, 512, 256, 256, 256, 1], "user_dim": 1664, "ad_dim": 1664 }"#,
    );
    let base = write(dir.path(), "base.json", BASE);
    let out = dir.path().join("est.json");
    let o = adscale(&[
        "simulate-cost",
        "--specs",
        s(&specs),
        "--base",
        s(&base),
        "--req0",
        "10",
        "--t-limit",
        "0.05",
        "--beta-lat",
        "1e-12",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(rows[0]["req"].as_f64(), Some(10.0));
    assert!(rows[1]["req"].as_f64().unwrap() < 10.0);
}

#[test]
fn fit_revenue_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let pts = write(
        dir.path(),
        "pts.csv",
        "r_over_rstar,revenue\n1,3\n2,5\n3,7\n",
    );
    let out = dir.path().join("g.json");
    let o = adscale(&["fit-revenue", "--points", s(&pts), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let g: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert!((g["slope"].as_f64().unwrap() - 2.0).abs() < 1e-12);
    assert!((g["intercept"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}
