use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn torus_lab(args: &[&str]) -> (i32, Value) {
    let out = Command::new(env!("CARGO_BIN_EXE_torus-lab")).args(args).output().unwrap();
    let stdout = String::from_utf8(out.stdout).unwrap();
    let line = stdout.lines().last().unwrap_or("null");
    (out.status.code().unwrap(), serde_json::from_str(line).unwrap_or(Value::Null))
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn check_potential_passes_on_builtin_example() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"potential": {"kind": "example"}, "kmax": 8}"#);
    let out = dir.path().join("out");
    let (code, summary) = torus_lab(&["check-potential", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{summary}");
    let v = read_json(&out.join("genericity.json"));
    assert_eq!(v["subcommand"], "check-potential");
    assert_eq!(v["result"]["passed"], true);
    assert_eq!(v["config"]["kmax"], 8);
    assert!(v["meta"]["elapsed_seconds"].is_number());
}

#[test]
fn zero_coupling_scan_reports_no_non_torus_orbits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"potential": {"kind": "pendulum_rotator"}, "eps": [0.0], "scan": {"grid": 10, "t_final": 500.0}}"#,
    );
    let out = dir.path().join("out");
    let (code, _) = torus_lab(&["scan", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "7"]);
    assert_eq!(code, 0);
    let v = read_json(&out.join("scan.json"));
    assert_eq!(v["result"][0]["counts"]["non_torus"], 0);
    assert_eq!(v["config"]["seed"], 7);
    assert_eq!(v["config"]["scan"]["seed"], 7);
    assert!(out.join("orbits_0.csv").is_file());
}

#[test]
fn config_errors_exit_with_code_two_and_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("nope.json");
    let (code, v) = torus_lab(&["zones", "--config", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert_eq!(v["error"]["exit_code"], 2);
    assert!(out.join("error.json").is_file());

    let cfg = write_config(dir.path(), r#"{"a": 0.5}"#);
    let (code, v) = torus_lab(&["zones", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert_eq!(v["error"]["kind"], "invalid_parameter");

    let cfg = write_config(dir.path(), r#"{"potential": {"kind": "file", "path": "absent.json"}}"#);
    let (code, _) = torus_lab(&["zones", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2);
}

#[test]
fn potential_files_resolve_relative_to_the_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("f.json"), r#"{"s": 1.0, "entries": [[1, 0, 0.5, 0.0], [0, 1, 0.1, 0.0]]}"#).unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"potential": {"kind": "file", "path": "f.json"}, "eps": [1e-3], "zone_grid": 30}"#,
    );
    let out = dir.path().join("out");
    let (code, _) = torus_lab(&["zones", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    let v = read_json(&out.join("zones.json"));
    assert_eq!(v["result"][0]["cutoff"], 2);
    let csv = std::fs::read_to_string(out.join("zones_0.csv")).unwrap();
    assert!(csv.starts_with("y1,y2,label"));
}

#[test]
fn payload_does_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"potential": {"kind": "example"}, "kmax": 3, "eps": [1e-3], "scan": {"grid": 12, "t_final": 400.0}}"#,
    );
    let mut payloads = vec![];
    for w in ["1", "3"] {
        let out = dir.path().join(format!("out{w}"));
        let (code, _) = torus_lab(&["scan", "--config", &cfg, "--out", out.to_str().unwrap(), "--workers", w]);
        assert!(code == 0 || code == 4);
        let mut v = read_json(&out.join("scan.json"));
        assert_eq!(v["meta"]["workers"].as_u64().unwrap().to_string(), w);
        v.as_object_mut().unwrap().remove("meta");
        payloads.push((v, std::fs::read(out.join("orbits_0.csv")).unwrap()));
    }
    assert_eq!(payloads[0], payloads[1]);
}
