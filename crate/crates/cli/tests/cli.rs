use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--seed", "3", "--train-skills", "4", "--holdouts", "1", "--train-episodes", "16", "--eval-episodes", "6",
    "--hidden", "20", "--layers", "2", "--rank", "4", "--epochs", "2", "--batch-size", "8",
];

fn skillbase(args: &[&str], small: bool, cwd: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_skillbase"));
    cmd.current_dir(cwd).args(args);
    if small {
        cmd.args(SMALL);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn train_infer_eval_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = skillbase(&["train-stream", "--output-dir", "run"], true, d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["kb.bin", "report.json", "timing.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    assert!(String::from_utf8_lossy(&out.stderr).contains("[4/4]"));

    let inf = skillbase(&["infer", "--kb", "run/kb.bin", "--instruction", "shift every value", "--input", "1,2,3", "--json"], true, d);
    assert_eq!(code(&inf), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&inf)).unwrap();
    let omega: f64 = v["omega"].as_array().unwrap().iter().map(|w| w.as_f64().unwrap()).sum();
    assert!((omega - 1.0).abs() < 1e-9);

    let ev = skillbase(&["eval", "--kb", "run/kb.bin", "--format", "csv", "--output-dir", "ev"], true, d);
    assert_eq!(code(&ev), 0);
    let csv = std::fs::read_to_string(d.join("ev/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);

    let ins = skillbase(&["kb", "inspect", "run/kb.bin", "--json"], false, d);
    assert_eq!(code(&ins), 0);
    let s: serde_json::Value = serde_json::from_str(&stdout(&ins)).unwrap();
    assert_eq!(s["records"].as_array().unwrap().len(), 4);

    let rep = skillbase(&["report", "run/report.json", "--format", "plotdata", "--out", "plots"], false, d);
    assert_eq!(code(&rep), 0);
    assert!(d.join("plots/plotdata.json").exists());

    // Another base model cannot use this knowledge base.
    let other = skillbase(&["eval", "--kb", "run/kb.bin", "--model-seed", "77"], true, d);
    assert_eq!(code(&other), 3);

    let bad_input = skillbase(&["infer", "--kb", "run/kb.bin", "--instruction", "x", "--input", "99"], true, d);
    assert_eq!(code(&bad_input), 2);
}

#[test]
fn config_file_and_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), r#"{"seed": 5, "stream": {"n_train_skills": 3, "n_holdout": 1}}"#).unwrap();
    let gen = skillbase(&["gen-stream", "--config", "cfg.json"], false, d);
    assert_eq!(code(&gen), 0, "{}", String::from_utf8_lossy(&gen.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&gen)).unwrap();
    assert_eq!(v["skills"].as_array().unwrap().len(), 4);

    let gen = skillbase(&["gen-stream", "--config", "cfg.json", "--train-skills", "5"], false, d);
    let v: serde_json::Value = serde_json::from_str(&stdout(&gen)).unwrap();
    assert_eq!(v["skills"].as_array().unwrap().len(), 6);

    std::fs::write(d.join("bad.json"), r#"{"seeed": 5}"#).unwrap();
    assert_eq!(code(&skillbase(&["gen-stream", "--config", "bad.json"], false, d)), 2);
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&skillbase(&["no-such-command"], false, d)), 2);
    assert_eq!(code(&skillbase(&["infer", "--kb", "x.bin"], false, d)), 2);
    assert_eq!(code(&skillbase(&["gen-stream", "--subspace-rank", "9"], false, d)), 2);
    std::fs::write(d.join("junk.bin"), b"not a knowledge base").unwrap();
    assert_eq!(code(&skillbase(&["kb", "inspect", "junk.bin"], false, d)), 3);
    assert_eq!(code(&skillbase(&["kb", "inspect", "missing.bin"], false, d)), 1);
    assert_eq!(code(&skillbase(&["--help"], false, d)), 0);
}

#[test]
fn ablate_writes_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = skillbase(
        &["ablate", "--seeds", "0,1", "--methods", "full,seq-ft", "--output-dir", "ab"],
        true,
        d,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("ab/ablation.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert_eq!(rows[1]["method"], "seq-ft");
    assert!(d.join("ab/full-seed1/report.json").exists());
}
