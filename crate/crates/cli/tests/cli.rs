use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn stitch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stitch"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = stitch(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn write(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn base_config(seed: u64) -> Value {
    json!({
        "sim": { "p": 20, "n": 3, "T": 2000, "seed": seed },
        "scheme": { "kind": "two_subset", "overlap_fraction": 0.5 },
        "s3id": {
            "n": 3, "S": 1, "batch_size": 10, "passes": 2, "seed": seed,
            "mode": "linear", "adam": { "step_size": 0.003 }
        },
        "sem": { "n": 3, "max_iters": 15, "restarts": 1, "seed": seed },
        "eval": { "max_lag": 1, "seed": 1 }
    })
}

struct Sim {
    dir: TempDir,
    config: PathBuf,
    data: PathBuf,
}

fn simulated(cfg: Value) -> Sim {
    let dir = TempDir::new().unwrap();
    let config = write(dir.path(), "run.json", &cfg);
    let data = dir.path().join("data");
    ok(&["simulate", "--config", s(&config), "--out", s(&data)]);
    Sim { dir, config, data }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_column(path: &Path, column: &str) -> Vec<f64> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let k = rdr.headers().unwrap().iter().position(|h| h == column).expect("column present");
    rdr.records().map(|r| r.unwrap()[k].parse().unwrap()).collect()
}

#[test]
fn simulate_writes_header_with_dimensions() {
    let sim = simulated(base_config(3));
    let header = read_json(&sim.data.join("data.json"));
    assert_eq!(header["p"], 20);
    assert_eq!(header["T"], 2000);
    let bytes = fs::metadata(sim.data.join("data.bin")).unwrap().len();
    assert_eq!(bytes, 20 * 2000 * 8);
    assert!(sim.data.join("scheme.json").exists());
    assert!(sim.data.join("truth.json").exists());
}

#[test]
fn simulate_is_bitwise_reproducible() {
    let a = simulated(base_config(5));
    let b = simulated(base_config(5));
    for f in ["data.bin", "data.json", "scheme.json", "truth.json"] {
        assert_eq!(fs::read(a.data.join(f)).unwrap(), fs::read(b.data.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_config_is_usage_error_and_writes_nothing() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let res = stitch(&["simulate", "--config", s(&dir.path().join("absent.json")), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let mut cfg = base_config(1);
    cfg["sim"]["bogus"] = json!(1);
    let config = write(dir.path(), "run.json", &cfg);
    let out = dir.path().join("out");
    let res = stitch(&["simulate", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn invalid_section_values_name_the_line() {
    let dir = TempDir::new().unwrap();
    let mut cfg = base_config(1);
    cfg["sim"]["n"] = json!(50);
    let config = write(dir.path(), "run.json", &cfg);
    let res = stitch(&["simulate", "--config", s(&config), "--out", s(&dir.path().join("out"))]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    let anchor = err.split("run.json:").nth(1).expect("path in message");
    let (line, rest) = anchor.split_once(':').unwrap();
    assert!(rest.trim_start().starts_with("sim"), "{err}");
    let text = fs::read_to_string(&config).unwrap();
    let shown = text.lines().nth(line.parse::<usize>().unwrap() - 1).unwrap();
    assert!(shown.contains("\"sim\""), "{shown}");
}

#[test]
fn unknown_method_is_usage_error() {
    let sim = simulated(base_config(2));
    let out = sim.dir.path().join("fit");
    let res = stitch(&["fit", "--data", s(&sim.data), "--method", "gibbs", "--config", s(&sim.config), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn unreadable_dataset_is_io_error() {
    let sim = simulated(base_config(2));
    fs::write(sim.data.join("data.bin"), [0u8; 16]).unwrap();
    let out = sim.dir.path().join("fit");
    let res = stitch(&["fit", "--data", s(&sim.data), "--method", "s3id", "--config", s(&sim.config), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(3));
}

#[test]
fn s3id_fit_writes_loadings_and_decreasing_trace() {
    let sim = simulated(base_config(4));
    let out = sim.dir.path().join("fit");
    ok(&["fit", "--data", s(&sim.data), "--method", "s3id", "--config", s(&sim.config), "--out", s(&out)]);
    let params = read_json(&out.join("params.json"));
    assert_eq!(params["method"], "s3id");
    let c = params["C"].as_array().unwrap();
    assert_eq!(c.len(), 20);
    assert!(c.iter().all(|row| row.as_array().unwrap().len() == 3));
    let loss = csv_column(&out.join("trace.csv"), "monitor_loss");
    assert!(loss.len() >= 2);
    assert!(loss.last().unwrap() < &loss[0], "{loss:?}");
}

#[test]
fn fa_posthoc_with_small_overlap_fails_numerically() {
    let mut cfg = base_config(6);
    cfg["scheme"] = json!({ "kind": "multi_subset", "k": 2, "overlap": 2 });
    let sim = simulated(cfg);
    let out = sim.dir.path().join("fit");
    let res = stitch(&["fit", "--data", s(&sim.data), "--method", "fa-posthoc", "--config", s(&sim.config), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(4));
    let diag = read_json(&out.join("diagnostics.json"));
    assert_eq!(diag["exit_code"], 4);
    assert_eq!(diag["method"], "fa-posthoc");
}

#[test]
fn fa_posthoc_with_enough_overlap_succeeds() {
    let sim = simulated(base_config(6));
    let out = sim.dir.path().join("fit");
    ok(&["fit", "--data", s(&sim.data), "--method", "fa-posthoc", "--config", s(&sim.config), "--out", s(&out)]);
    let params = read_json(&out.join("params.json"));
    assert_eq!(params["kind"], "moments");
}

#[test]
fn s3id_initialisation_starts_above_random_starts() {
    let sim = simulated(base_config(7));
    let warm = sim.dir.path().join("warm");
    ok(&["fit", "--data", s(&sim.data), "--method", "s3id+sem", "--config", s(&sim.config), "--out", s(&warm)]);
    assert!(warm.join("s3id_trace.csv").exists());
    let warm_start = csv_column(&warm.join("trace.csv"), "loglik")[0];

    let mut cold_starts = Vec::new();
    for seed in 0..4u64 {
        let mut cfg = base_config(7);
        cfg["sem"]["seed"] = json!(100 + seed);
        let config = write(sim.dir.path(), &format!("cold{seed}.json"), &cfg);
        let out = sim.dir.path().join(format!("cold{seed}"));
        ok(&["fit", "--data", s(&sim.data), "--method", "sem", "--config", s(&config), "--out", s(&out)]);
        cold_starts.push(csv_column(&out.join("trace.csv"), "loglik")[0]);
    }
    cold_starts.sort_by(f64::total_cmp);
    let median = 0.5 * (cold_starts[1] + cold_starts[2]);
    assert!(warm_start > median, "warm {warm_start} vs cold {cold_starts:?}");
}

#[test]
fn eval_of_truth_against_itself_is_perfect() {
    let sim = simulated(base_config(8));
    let truth = sim.data.join("truth.json");
    let report_path = sim.dir.path().join("report.json");
    ok(&[
        "eval", "--params", s(&truth), "--truth", s(&truth), "--scheme", s(&sim.data.join("scheme.json")),
        "--out", s(&report_path), "--config", s(&sim.config),
    ]);
    let report = read_json(&report_path);
    assert!(report["projection_error"].as_f64().unwrap() < 1e-12);
    assert!(report["largest_principal_angle"].as_f64().unwrap() < 1e-4);
    for c in report["prediction_correlation_per_lag"].as_array().unwrap() {
        assert!((c.as_f64().unwrap() - 1.0).abs() < 1e-9, "{c}");
    }
    assert!(sim.dir.path().join("report_spectra.csv").exists());
    assert!(sim.dir.path().join("report_correlation.csv").exists());
}

fn pipeline(root: &Path) -> Value {
    let config = write(root, "run.json", &base_config(9));
    let data = root.join("data");
    let fit = root.join("fit");
    let report = root.join("report.json");
    ok(&["simulate", "--config", s(&config), "--out", s(&data)]);
    ok(&["fit", "--data", s(&data), "--method", "s3id", "--config", s(&config), "--out", s(&fit)]);
    ok(&[
        "eval", "--params", s(&fit.join("params.json")), "--truth", s(&data.join("truth.json")),
        "--scheme", s(&data.join("scheme.json")), "--out", s(&report), "--config", s(&config),
    ]);
    read_json(&report)
}

#[test]
fn report_matches_schema() {
    let dir = TempDir::new().unwrap();
    let report = pipeline(dir.path());
    let schema: Value = serde_json::from_str(include_str!("../schema/eval_report.schema.json")).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&report).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
    assert_eq!(report["method"], "s3id");
}

#[test]
fn pipeline_is_deterministic() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    assert_eq!(pipeline(a.path()), pipeline(b.path()));
    assert_eq!(fs::read(a.path().join("fit/params.json")).unwrap(), fs::read(b.path().join("fit/params.json")).unwrap());
}

#[test]
fn eval_against_held_out_data() {
    let sim = simulated(base_config(10));
    let mut held = base_config(11);
    held["scheme"] = json!({ "kind": "full" });
    let held = simulated(held);
    let report_path = sim.dir.path().join("report.json");
    ok(&[
        "eval", "--params", s(&sim.data.join("truth.json")), "--truth", s(&held.data),
        "--scheme", s(&sim.data.join("scheme.json")), "--out", s(&report_path),
    ]);
    let report = read_json(&report_path);
    assert!(report["projection_error"].is_null());
    assert!(report["prediction_correlation_per_lag"][0].is_number());
}
