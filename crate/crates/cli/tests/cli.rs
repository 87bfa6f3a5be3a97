use std::path::Path;
use std::process::Command;

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_rough-young");

struct Run {
    code: i32,
    envelope: Value,
}

fn run(args: &[&str], out: &Path) -> Run {
    let o = Command::new(BIN).args(args).arg("--out").arg(out).output().expect("binary runs");
    let text = String::from_utf8(o.stdout).expect("utf-8 stdout");
    let envelope = serde_json::from_str(&text).unwrap_or_else(|e| panic!("stdout is not an envelope ({e}): {text}"));
    Run { code: o.status.code().unwrap_or(-1), envelope }
}

fn data_rows(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn integrate_builtin_gives_one_half() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&["integrate"], dir.path());
    assert_eq!(r.code, 0, "{}", r.envelope);
    let v = r.envelope["outputs"]["value"][0].as_f64().unwrap();
    assert!((v - 0.5).abs() < 1e-5, "{v}");
    assert!(r.envelope["verdicts"][0]["pass"].as_bool().unwrap());
    assert!(dir.path().join("integrate.json").exists());
}

#[test]
fn eight_level_trace_gives_eight_rows() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&["integrate", "--levels", "7"], dir.path());
    assert_eq!(r.code, 0);
    assert_eq!(data_rows(&dir.path().join("integrate_convergence.csv")).len(), 8);
    assert_eq!(data_rows(&dir.path().join("integrate_trace.csv")).len(), 8);
}

#[test]
fn empty_and_malformed_configs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    for text in ["{}", "", "{\"task\": {\"integrate\": {\"nope\": 1}}}", "{\"task\": {\"integrate\": {}}, \"extra\": 0}"] {
        let cfg = write_config(dir.path(), text);
        let r = run(&["--config", &cfg], dir.path());
        assert_eq!(r.code, 2, "{text}: {}", r.envelope);
        assert_eq!(r.envelope["error"]["kind"], "usage");
    }
    assert_eq!(run(&[], dir.path()).code, 2);
    assert_eq!(run(&["integrate", "--field", "builtin:nope"], dir.path()).code, 2);
    assert_eq!(run(&["suite", "--only", "99"], dir.path()).code, 2);
}

#[test]
fn module_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&["integrate", "--tol", "1e-15"], dir.path());
    assert_eq!(r.code, 1, "{}", r.envelope);
    assert_eq!(r.envelope["error"]["kind"], "convergence");
}

#[test]
fn failed_verdict_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&["flow", "--x0", "-0.5", "--inverse-check", "--tol", "1e-30"], dir.path());
    assert_eq!(r.code, 3, "{}", r.envelope);
    assert_eq!(r.envelope["verdicts"][0]["pass"], false);
}

#[test]
fn config_file_matches_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let flags = ["flow", "--field", "builtin:rotation", "--x0", "1,0", "--steps", "256", "--scheme", "second-order", "--jacobian"];
    let ra = run(&flags, &a);
    assert_eq!(ra.code, 0, "{}", ra.envelope);
    let cfg = serde_json::to_string(&ra.envelope["config"]).unwrap();
    let rb = run(&["--config", &write_config(dir.path(), &cfg)], &b);
    assert_eq!(rb.code, 0);
    let name = "flow_trajectory.csv";
    assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
    // Rotation by angle t: end point (cos 1, sin 1), second order in 1/steps.
    let end = ra.envelope["outputs"]["end_state"].as_array().unwrap();
    assert!((end[0].as_f64().unwrap() - 1f64.cos()).abs() < 1e-5);
    assert!((end[1].as_f64().unwrap() - 1f64.sin()).abs() < 1e-5);
}

#[test]
fn transport_raster_has_one_row_per_node() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&["transport", "--field", "builtin:drift", "--grid", "-1:1:64,-1:1:64", "--steps", "8"], dir.path());
    assert_eq!(r.code, 0, "{}", r.envelope);
    let rows = data_rows(&dir.path().join("transport_raster.csv"));
    assert_eq!(rows.len(), 4096);
    // u(1, x) = h(x - b) for the constant drift b = (1, 0.5).
    for row in rows.iter().step_by(97) {
        let exact = (-((row[0] - 1.0).powi(2) + (row[1] - 0.5).powi(2))).exp();
        assert!((row[2] - exact).abs() < 1e-12);
    }
}

#[test]
fn concentration_rows_respect_the_bound() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&["sheet", "--draws", "500", "--check", "concentration"], dir.path());
    assert_eq!(r.code, 0, "{}", r.envelope);
    let rows = data_rows(&dir.path().join("sheet_tail.csv"));
    assert_eq!(rows.len(), 3);
    for row in rows {
        assert!(row[1] <= row[2], "{row:?}");
    }
}

#[test]
fn fk_heat_case_matches_reference() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&["fk", "--paths", "4000", "--steps", "8", "--fd-check"], dir.path());
    assert_eq!(r.code, 0, "{}", r.envelope);
    // u(0, x) = x^2 + 1 with W = 0 and u_T = x^2.
    for p in r.envelope["outputs"]["points"].as_array().unwrap() {
        let x = p["x"][0].as_f64().unwrap();
        let (u, se) = (p["u"].as_f64().unwrap(), p["stderr"].as_f64().unwrap());
        assert!((u - x * x - 1.0).abs() <= 4.0 * se, "{p}");
    }
    assert_eq!(data_rows(&dir.path().join("fk_raster.csv")).len(), 3);
}

#[test]
fn same_config_twice_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = ["sheet", "--hurst", "0.3,0.8", "--draws", "300", "--check", "covariance"];
    assert_eq!(run(&args, &a).code, 0);
    assert_eq!(run(&args, &b).code, 0);
    for name in ["sheet_sample.csv", "sheet_covariance.csv"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn suite_subset_lists_each_criterion() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&["suite", "--only", "1,4"], dir.path());
    assert_eq!(r.code, 0, "{}", r.envelope);
    let ids: Vec<u64> = r.envelope["outputs"]["criteria"].as_array().unwrap().iter().map(|c| c["id"].as_u64().unwrap()).collect();
    assert_eq!(ids, [1, 4]);
    assert!(dir.path().join("acceptance/c01_young_reduction.csv").exists());
    assert!(r.envelope["verdicts"].as_array().unwrap().iter().all(|v| v["name"].as_str().unwrap().starts_with('c')));
}
