use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn steer(args: &[&str]) -> Output { Command::new(env!("CARGO_BIN_EXE_steer")).args(args).output().unwrap() }

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const W_GREEDY: &str = r#"{"name": "w_small", "target": {"kind": "w_state"}, "policy": {"kind": "greedy"}, "n_runs": 12, "master_seed": 3}"#;

#[test]
fn run_writes_csv_and_summary() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "w.json", W_GREEDY);
    let out = d.path().join("out");
    let o = steer(&["run", "--config", &cfg, "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("w_small_runs.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("run_index,seed,tau,terminated,final_infidelity"));
    assert_eq!(lines.count(), 12);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("w_small_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["stats"]["n_runs"], 12);
    assert_eq!(summary["config"]["master_seed"], 3);
    let stdout: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(stdout["tau_av"].as_f64().unwrap() > 0.0);
}

#[test]
fn run_is_deterministic_across_threads() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "w.json", W_GREEDY);
    let mut csvs = Vec::new();
    for (dir, threads) in [("a", "1"), ("b", "3")] {
        let out = d.path().join(dir);
        let o = steer(&["run", "--config", &cfg, "--threads", threads, "--seed", "8", "--out-dir", out.to_str().unwrap()]);
        assert!(o.status.success());
        csvs.push(fs::read(out.join("w_small_runs.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn bad_config_reports_json_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "bad.json", r#"{"target": {"kind": "w_state"}, "policy": {"kind": "passive"}, "dt": -1}"#);
    let o = steer(&["run", "--config", &cfg, "--out-dir", d.path().to_str().unwrap()]);
    assert!(!o.status.success());
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("dt"));

    let o = steer(&["run", "--config", d.path().join("missing.json").to_str().unwrap()]);
    assert!(!o.status.success());
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "io");
}

#[test]
fn unknown_fields_are_rejected() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "typo.json", r#"{"target": {"kind": "w_state"}, "policy": {"kind": "passive"}, "n_run": 5}"#);
    let o = steer(&["run", "--config", &cfg, "--out-dir", d.path().to_str().unwrap()]);
    assert!(!o.status.success());
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "json");
}

#[test]
fn qsm_export_writes_graphs() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "wq.json", r#"{"target": {"kind": "w_state"}, "policy": {"kind": "qsm_plan"}}"#);
    let out = d.path().join("q");
    let o = steer(&["qsm", "export", "--config", &cfg, "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = String::from_utf8_lossy(&o.stdout).trim().to_string();
    assert_eq!(line, format!("8 vertices, {} edges, 4 blocks", edge_count(&out)));
    let dot = fs::read_to_string(out.join("wq_qsm.dot")).unwrap();
    assert!(dot.starts_with("digraph qsm {"));
    let coarse: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("wq_coarse.json")).unwrap()).unwrap();
    assert_eq!(coarse["blocks"].as_array().unwrap().len(), 4);
}

fn edge_count(out: &Path) -> String {
    let g: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("wq_qsm.json")).unwrap()).unwrap();
    g["edges"].as_array().unwrap().len().to_string()
}

#[test]
fn sweep_writes_table() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(
        d.path(),
        "prod.json",
        r#"{"base": {"target": {"kind": "product"}, "policy": {"kind": "passive"}, "n_runs": 10},
            "sizes": [1, 2], "passive": {"kind": "passive"}, "active": {"kind": "partial_termination"}}"#,
    );
    let o = steer(&["sweep", "--config", &cfg, "--out-dir", d.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(d.path().join("prod_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn shipped_configs_parse() {
    use steer_core::harness::{ExperimentConfig, PolicySpec, SurveyConfig};
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let name = path.display();
        if v.get("base").is_some() {
            ExperimentConfig::from_json(&v["base"].to_string()).unwrap_or_else(|e| panic!("{name}: {e}"));
            for k in ["passive", "active"] {
                serde_json::from_value::<PolicySpec>(v[k].clone()).unwrap_or_else(|e| panic!("{name}: {e}"));
            }
        } else if v.get("n_targets").is_some() {
            serde_json::from_str::<SurveyConfig>(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        } else {
            ExperimentConfig::from_json(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        seen += 1;
    }
    assert!(seen >= 9);
}

#[test]
fn config_output_dir_and_traces() {
    let d = tempfile::tempdir().unwrap();
    let target = d.path().join("from_config");
    let body = format!(
        r#"{{"name": "sq", "target": {{"kind": "single_qubit"}}, "policy": {{"kind": "passive"}}, "n_runs": 3,
            "output": {{"dir": {:?}, "traces": true}}}}"#,
        target.to_str().unwrap()
    );
    let cfg = write(d.path(), "sq.json", &body);
    let o = steer(&["run", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(target.join("sq_runs.csv").exists());
    assert!(target.join("sq_traces.csv").exists());
}
