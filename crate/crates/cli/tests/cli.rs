use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn haarfactor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_haarfactor")).args(args).output().expect("binary runs")
}

fn write_json(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_vec(v).unwrap()).unwrap();
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stderr)))
}

#[test]
fn norms_of_small_vectors() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("v.json");
    // h_[0,1) alone, and h_[0,1) + h_[0,1/2): square function sqrt(2) on the left half, 1 on the right.
    write_json(&input, &json!([{ "depth": 0, "coeffs": [1.0] }, { "depth": 1, "coeffs": [1.0, 1.0, 0.0] }]));
    let out = haarfactor(&["norms", "--input", input.to_str().unwrap()]);
    assert!(out.status.success());
    let v = stdout_json(&out);
    let rows = v["result"]["vectors"].as_array().unwrap();
    assert_eq!(rows[0]["sl_inf"], json!(1.0));
    assert_eq!(rows[0]["h1"], json!(1.0));
    assert_eq!(rows[1]["sl_inf"].as_f64().unwrap(), 2f64.sqrt());
    assert!((rows[1]["h1"].as_f64().unwrap() - (2f64.sqrt() + 1.0) / 2.0).abs() < 1e-15);
    // <h, h + h_[0,1/2)> = |[0,1)|.
    assert_eq!(v["result"]["pairings"][0][1], json!(1.0));
    assert_eq!(v["config"]["subcommand"], json!("norms"));
}

#[test]
fn csv_output_has_a_header() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("v.json");
    write_json(&input, &json!({ "depth": 0, "coeffs": [2.0] }));
    let out = haarfactor(&["--format", "csv", "norms", "--input", input.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("index,depth,sl_inf,h1"));
    assert_eq!(lines.next(), Some("0,0,2,2"));
}

#[test]
fn missing_input_is_a_usage_error() {
    let out = haarfactor(&["norms", "--input", "/nonexistent/v.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn certificate_round_trip_and_tamper_detection() {
    let dir = tempfile::tempdir().unwrap();
    let cert = dir.path().join("cert.json");
    let out = haarfactor(&[
        "--out",
        cert.to_str().unwrap(),
        "factor-local",
        "--builtin",
        "identity",
        "--depth",
        "6",
        "--n",
        "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ok = haarfactor(&["verify-cert", "--cert", cert.to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0));
    assert_eq!(stdout_json(&ok)["result"]["all_passed"], json!(true));

    let mut doc: Value = serde_json::from_slice(&std::fs::read(&cert).unwrap()).unwrap();
    let entry = &mut doc["result"]["certificate"]["S"]["rows"][0][0];
    *entry = json!(entry.as_f64().unwrap() + 1e-3);
    let bad = dir.path().join("bad.json");
    write_json(&bad, &doc);
    let caught = haarfactor(&["verify-cert", "--cert", bad.to_str().unwrap()]);
    assert_eq!(caught.status.code(), Some(2));
    assert_eq!(stdout_json(&caught)["result"]["all_passed"], json!(false));
}

#[test]
fn identical_output_across_thread_counts() {
    let run = |jobs: &str| {
        let out = haarfactor(&[
            "--jobs", jobs, "--seed", "4", "factor-local", "--generate", "diag_dominant:0.5:0.02", "--depth", "8",
            "--n", "1", "--batch", "3",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out.stdout
    };
    assert_eq!(run("1"), run("2"));
}
