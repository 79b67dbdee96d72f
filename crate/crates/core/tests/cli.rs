use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn aldsgd(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aldsgd"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, body).unwrap();
    p
}

const RUN: &str = r#"{
  "schema": 1,
  "preset": "aldsgd",
  "topology": {"kind": "pendant_ring", "m": 6, "dynamic_n": 2},
  "problem": {"kind": "quadratic", "d": 4, "n_samples": 240},
  "hyper": {"gamma": 0.05, "c_b": 0.5},
  "K": 40,
  "seed": 3,
  "stride": 10
}"#;

#[test]
fn run_writes_metrics_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), RUN);
    let out = dir.path().join("out");
    let o = aldsgd(&["run"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let mut rdr = csv::Reader::from_path(out.join("metrics.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header,
        ["k", "node", "local_loss", "eval_loss", "consensus_dist", "global_grad_norm_sq"]
    );
    // Rows at k = 0, 10, .., 40 for each of 6 nodes.
    assert_eq!(rdr.records().count(), 5 * 6);

    let summary: Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["rounds_completed"], 40);
    assert_eq!(summary["diverged"], false);
}

#[test]
fn seed_flag_changes_output_and_reruns_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), RUN);
    let read = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        assert!(aldsgd(&["run", "--seed", seed], &cfg, &out).status.success());
        std::fs::read(out.join("metrics.csv")).unwrap()
    };
    let a = read("a", "9");
    assert_eq!(a, read("b", "9"));
    assert_ne!(a, read("c", "10"));
}

#[test]
fn bad_config_exits_2_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &RUN.replace(r#""gamma": 0.05"#, r#""gamma": "fast""#));
    let o = aldsgd(&["run"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("hyper.gamma"));

    let cfg = write_config(dir.path(), &RUN.replace(r#""schema": 1"#, r#""schema": 7"#));
    assert_eq!(aldsgd(&["run"], &cfg, &dir.path().join("out")).status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &RUN.replace(r#""gamma": 0.05"#, r#""gamma": 50.0"#));
    let out = dir.path().join("out");
    let o = aldsgd(&["run"], &cfg, &out);
    assert_eq!(o.status.code(), Some(3));
    let summary: Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["diverged"], true);
}

#[test]
fn spectral_on_complete_graph_at_one_over_m_is_exact_averaging() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{
  "schema": 1,
  "preset": "dpsgd",
  "topology": {"kind": "complete", "m": 4},
  "problem": {"kind": "quadratic", "d": 2, "n_samples": 40},
  "K": 1,
  "spectral": {"alpha": 0.25, "samples": 200, "trials": 50}
}"#,
    );
    let out = dir.path().join("out");
    let o = aldsgd(&["spectral"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let s: Value = serde_json::from_slice(&std::fs::read(out.join("spectral.json")).unwrap()).unwrap();
    assert!(s["rho"].as_f64().unwrap() < 1e-12);
    // The window is open and 1/lambda is its lower end.
    assert_eq!(s["alpha_in_range"], false);
    assert_eq!(s["alpha_min"].as_f64().unwrap(), 0.25);
    assert_eq!(s["lambda_min"].as_f64().unwrap(), 4.0);
}

#[test]
fn infeasible_k_free_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &RUN.replace(r#""stride": 10"#, r#""stride": 10, "spectral": {"k_free": 0.1}"#),
    );
    let o = aldsgd(&["spectral"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &RUN.replace(
            r#""stride": 10"#,
            r#""stride": 10, "sweep": {"preset": ["dpsgd", "aldsgd"], "seed": [1, 2, 3]}"#,
        ),
    );
    let out = dir.path().join("out");
    let o = aldsgd(&["sweep", "--jobs", "2"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(out.join("aggregate.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 6);
    assert_eq!(&rows[0][3], "dpsgd");
    assert_eq!(&rows[5][3], "aldsgd");
    assert!(out.join("cell_005").join("metrics.csv").exists());
}

#[test]
fn empty_sweep_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &RUN.replace(r#""stride": 10"#, r#""stride": 10, "sweep": {"seed": []}"#),
    );
    assert_eq!(aldsgd(&["sweep"], &cfg, &dir.path().join("out")).status.code(), Some(2));
}

#[test]
fn decompose_prints_matchings_per_phase() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), RUN);
    let o = aldsgd(&["decompose"], &cfg, &dir.path().join("out"));
    assert!(o.status.success());
    let phases: Value = serde_json::from_slice(&o.stdout).unwrap();
    let phases = phases.as_array().unwrap();
    assert_eq!(phases.len(), 2);
    for p in phases {
        let edges: usize = p["matchings"]
            .as_array()
            .unwrap()
            .iter()
            .map(|m| m["edges"].as_array().unwrap().len())
            .sum();
        // pendant_ring(6): a 5-cycle plus one pendant edge.
        assert_eq!(edges, 6);
        assert_eq!(p["total_degree"], 6);
    }
}
