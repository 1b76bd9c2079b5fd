use std::fs;
use std::process::{Command, Output};

use serde_json::Value;

fn zolab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zolab")).args(args).output().expect("spawn zolab")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

#[test]
fn configuration_errors_exit_2() {
    for args in [
        &["run", "--set", "foo.bar=1"][..],
        &["run", "--set", "model.dim=65"],
        &["run", "--set", "opt.kind=adam", "--set", "opt.probes=4"],
        &["run", "--set", "model.preset=roberta-large"],
        &["estimate-mem", "--preset", "nope", "--optimizer", "sgd"],
        &["probe-stats", "--dim", "1"],
    ] {
        assert_eq!(code(&zolab(args)), 2, "{args:?}");
    }
}

#[test]
fn config_file_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.conf");
    fs::write(&path, "# comment\ntrain.steps = 2\nmodel.width = 8\n").unwrap();
    let out = zolab(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(":3") && err.contains("model.width"), "{err}");
}

#[test]
fn estimate_mem_verdicts() {
    let out = zolab(&[
        "estimate-mem",
        "--preset",
        "roberta-large",
        "--optimizer",
        "adam",
        "--batch-size",
        "64",
        "--budget-gb",
        "12",
        "--json",
    ]);
    assert_eq!(code(&out), 3);
    assert_eq!(stdout_json(&out)["verdict"], "oom");

    let out = zolab(&[
        "estimate-mem",
        "--preset",
        "opt-1.3b",
        "--optimizer",
        "mezo",
        "--batch-size",
        "8",
        "--budget-gb",
        "12",
        "--json",
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout_json(&out)["verdict"], "fits");

    let out = zolab(&["estimate-mem", "--preset", "toy", "--optimizer", "sgd", "--batch-size", "1", "--json"]);
    assert_eq!(code(&out), 0);
    let v = stdout_json(&out);
    assert_eq!(v["optstate"], 0);
    assert_eq!(v["grads"], v["weights"]);
}

#[test]
fn estimate_mem_text_has_every_category() {
    let out = zolab(&["estimate-mem", "--preset", "toy", "--optimizer", "adam", "--budget-gb", "1"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for row in ["weights", "grads", "optstate", "activation", "transient", "total", "verdict     fits"] {
        assert!(text.contains(row), "missing {row}:\n{text}");
    }
}

#[test]
fn run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = zolab(&[
        "run",
        "--optimizer",
        "mezo",
        "--batch-size",
        "4",
        "--steps",
        "3",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("steps.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let summary: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["verdict"], "ok");
    assert_eq!(summary["totals"]["loss_evaluations"], 6);

    let dat = fs::read_to_string(out_dir.join("loss.dat")).unwrap();
    let rows: Vec<&str> = dat.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 3);
    for (i, r) in rows.iter().enumerate() {
        let cols: Vec<&str> = r.split_whitespace().collect();
        assert_eq!(cols.len(), 2);
        assert_eq!(cols[0], (i + 1).to_string());
        assert!(cols[1].parse::<f64>().unwrap().is_finite());
    }
}

#[test]
fn simulated_oom_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("oom");
    let out = zolab(&[
        "run",
        "--optimizer",
        "adam",
        "--steps",
        "2",
        "--budget-bytes",
        "1000000",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
    let summary: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["verdict"], "oom");
    assert_eq!(summary["step"], 1);
}

#[test]
fn failed_grad_check_exits_4() {
    let out = zolab(&["grad-check", "--coords", "20", "--tol", "1e-12"]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn compare_renders_oom_cells() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("grid");
    // fits all cells except Adam at B=8 (about 4.7 MB)
    let out = zolab(&[
        "compare",
        "--batch-sizes",
        "1,8",
        "--steps",
        "2",
        "--budget-bytes",
        "3500000",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(out_dir.join("memory_table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "batch_size,mezo,adam");
    assert!(lines[2].starts_with("8,") && lines[2].ends_with(",OOM"), "{table}");
    assert!(!lines[1].contains("OOM"), "{table}");
}
