use std::path::Path;
use std::process::{Command, Output};

use glcell::snapshot::{write_field, Snapshot};
use glcell::{DiscreteField, Grid};
use num_complex::Complex64;
use serde_json::Value;

fn glcell(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glcell"))
        .args(args)
        .current_dir(dir)
        .env("GLCELL_THREADS", "1")
        .output()
        .expect("spawn glcell")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn minimize_writes_snapshot_and_result() {
    let dir = tempfile::tempdir().unwrap();
    let o = glcell(&["minimize", "--b", "0.1", "--N", "4", "--n", "128", "--init", "trial", "--out", "run1/"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let result = json(&dir.path().join("run1/result.json"));
    assert_eq!(result["status"], "converged");
    for key in ["kinetic", "potential", "offset", "total"] {
        assert!(result["energy"][key].is_f64(), "missing energy.{key}");
    }
    let snap = Snapshot::read(&dir.path().join("run1/field.glc")).unwrap();
    assert_eq!((snap.header.n, snap.header.n_vortices), (128, 4));
}

#[test]
fn minimize_rejects_b_out_of_range() {
    let dir = tempfile::tempdir().unwrap();
    let o = glcell(&["minimize", "--b", "1.5", "--N", "4", "--n", "128"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("b out of range"), "{}", stderr(&o));
}

#[test]
fn minimize_max_iterations_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = glcell(&["minimize", "--b", "0.5", "--N", "1", "--n", "32", "--init", "random", "--max-iter", "3"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_eq!(json(&dir.path().join("result.json"))["status"], "max-iterations");
}

#[test]
fn repeated_minimize_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| {
        vec!["minimize", "--b", "0.5", "--N", "1", "--n", "32", "--init", "random", "--seed", "7", "--out", out]
    };
    assert_eq!(glcell(&args("a"), dir.path()).status.code(), Some(0));
    assert_eq!(glcell(&args("b"), dir.path()).status.code(), Some(0));
    let a = std::fs::read(dir.path().join("a/result.json")).unwrap();
    let b = std::fs::read(dir.path().join("b/result.json")).unwrap();
    assert_eq!(a, b);
    let fa = Snapshot::read(&dir.path().join("a/field.glc")).unwrap();
    let fb = Snapshot::read(&dir.path().join("b/field.glc")).unwrap();
    assert_eq!(fa.data, fb.data);
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), r#"{"b": 0.3, "N": 1, "n": 32, "init": ["uniform"], "out": "fromfile"}"#).unwrap();
    let o = glcell(&["minimize", "--config", "run.json", "--b", "0.5"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let result = json(&dir.path().join("fromfile/result.json"));
    assert_eq!(result["config"]["b"], 0.5);
    assert_eq!(result["init"], "uniform");

    std::fs::write(dir.path().join("bad.json"), r#"{"b": 0.3, "colour": 1}"#).unwrap();
    let o = glcell(&["minimize", "--config", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown field"), "{}", stderr(&o));
}

#[test]
fn trial_prints_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let o = glcell(&["trial", "--b", "0.01", "--N", "16", "--n", "1024"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("predicted = -0.47697"), "{}", stdout(&o));
    let report = json(&dir.path().join("report.json"));
    for key in ["g_trial", "predicted", "gap"] {
        assert!(report[key].is_f64(), "missing {key}");
    }
    assert_eq!(report["boundary_winding"], 16);
    assert!(dir.path().join("trial.glc").exists());
}

#[test]
fn trial_rejects_non_square_count() {
    let dir = tempfile::tempdir().unwrap();
    let o = glcell(&["trial", "--b", "0.04", "--N", "5"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("trial requires square N"), "{}", stderr(&o));
}

#[test]
fn missing_b_prints_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = glcell(&["trial", "--N", "4"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage: glcell trial"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = glcell(&["trial", "--bogus"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn vortices_of_trial_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(glcell(&["trial", "--b", "0.04", "--N", "4", "--out", "t"], dir.path()).status.code(), Some(0));
    let o = glcell(&["vortices", "t/trial.glc", "--out", "v"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let balls = json(&dir.path().join("v/balls.json"));
    let balls = balls.as_array().unwrap();
    assert_eq!(balls.len(), 4);
    assert!(balls.iter().all(|b| b["degree"] == 1));
    let squares = std::fs::read_to_string(dir.path().join("v/squares.jsonl")).unwrap();
    assert_eq!(squares.lines().count(), 4);
    let vort = Snapshot::read(&dir.path().join("v/vorticity.glc")).unwrap();
    assert_eq!(vort.header.channels, ["mu", "phase_vorticity"]);
}

#[test]
fn vortices_of_uniform_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grid::unchecked(4, 202);
    write_field(&dir.path().join("one.glc"), &DiscreteField::constant(g, Complex64::new(1.0, 0.0)), 0.04).unwrap();
    let o = glcell(&["vortices", "one.glc"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(json(&dir.path().join("balls.json")), Value::Array(vec![]));
}

#[test]
fn vortices_rejects_truncated_payload() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grid::unchecked(4, 202);
    let path = dir.path().join("one.glc");
    write_field(&path, &DiscreteField::constant(g, Complex64::new(1.0, 0.0)), 0.04).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    let o = glcell(&["vortices", "one.glc"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("payload length mismatch"), "{}", stderr(&o));
}

#[test]
fn sweep_three_points() {
    let dir = tempfile::tempdir().unwrap();
    let o = glcell(&["sweep", "--b", "0.1,0.05,0.02", "--N", "16", "--jobs", "3", "--report", "acceptance"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header, glcell::analysis::CSV_COLUMNS);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    for name in ["pass_upper_bound", "pass_range", "pass_asymptotic", "pass_potential"] {
        assert!(rows.iter().all(|r| r[col(name)] == "true" || r[col(name)] == "false"), "{name}");
    }
    assert!(["true", "false"].contains(&rows[1][col("pass_derivative")]));
    assert!(rows.iter().all(|r| r[col("n")] == rows[0][col("n")]));
    let out = stdout(&o);
    assert!(out.contains("upper-bound") && out.contains("monotone in b"), "{out}");
    assert!(json(&dir.path().join("sweep.json"))["rows"].as_array().unwrap().len() == 3);
}

#[test]
fn sweep_single_point() {
    let dir = tempfile::tempdir().unwrap();
    let o = glcell(&["sweep", "--b", "0.1", "--N", "4"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!((row[5], row[6]), ("", ""));
    assert!(row[16].contains("insufficient points"));
}
