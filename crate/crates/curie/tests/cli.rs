use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use curie::checkpoint::Checkpoint;
use curie_core::irreps::wigner_3j;
use curie_core::network::{Model, ModelConfig};
use curie_core::scenarios::{make_square_rect_task, Deformation};

fn curie(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_curie")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn run(config: &Path, out: &Path) -> Output {
    curie(&["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

const SQUARE: &str = r#"{"version": 1, "scenario": {"kind": "square_to_rect"}, "seed": 1, "discovery": {"target_mse": 1e-6}, "grid_res": 12}"#;

#[test]
fn discovery_run_writes_every_file_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "square.json", SQUARE);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = run(&cfg, &a);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "results.json",
        "magnitudes.csv",
        "model.ckpt",
        "manifest.json",
        "structure.json",
        "structure.xyz",
        "signals/site_00.csv",
        "signals/site_03.csv",
    ] {
        assert!(a.join(f).is_file(), "{f} missing");
    }

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_object().unwrap();
    assert!(files.contains_key("results.json") && files.contains_key("signals/site_02.csv"));
    for (name, entry) in files {
        let data = std::fs::read(a.join(name)).unwrap();
        let hash: String = Sha256::digest(&data).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(entry["sha256"].as_str().unwrap(), hash, "{name}");
    }

    // 24 x 12 grid rows plus the header
    let csv = std::fs::read_to_string(a.join("signals/site_00.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 12 * 24);
    assert!(csv.starts_with("theta,phi,x,y,z,weight,output,target"));

    assert!(run(&cfg, &b).status.success());
    let ra: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("results.json")).unwrap()).unwrap();
    let rb: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(b.join("results.json")).unwrap()).unwrap();
    assert_eq!(ra, rb);
    assert!(ra["final_mse"].as_f64().unwrap() < 1e-3);
    assert_eq!(ra["stabilizer_after"]["elements"].as_array().unwrap().len(), 8);

    // the checkpoint is accepted by `check`
    let check_cfg = write_config(
        dir.path(),
        "check.json",
        &format!(
            r#"{{"version": 1, "scenario": {{"kind": "square_to_rect"}}, "checkpoint": "{}"}}"#,
            a.join("model.ckpt").display()
        ),
    );
    let out = curie(&["check", "--config", check_cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn unknown_key_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.json",
        r#"{"version": 1, "scenario": {"kind": "square_to_rect"}, "learning_rat": 0.1}"#,
    );
    let out_dir = dir.path().join("out");
    let out = run(&cfg, &out_dir);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn missing_config_exits_2() {
    let out = curie(&["run", "--config", "/nonexistent/config.json", "--out", "/nonexistent/out"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergent_run_exits_3_with_partial_history() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "div.json",
        r#"{"version": 1, "scenario": {"kind": "rect_to_square"}, "pipeline": "train", "training": {"steps": 500, "learning_rate": 10.0}}"#,
    );
    let out_dir = dir.path().join("out");
    let out = run(&cfg, &out_dir);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let h: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("history.json")).unwrap()).unwrap();
    assert!(!h["model"].as_array().unwrap().is_empty());
    assert!(out_dir.join("manifest.json").is_file());
}

#[test]
fn fresh_square_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"version": 1, "scenario": {"kind": "square_to_rect"}, "seed": 5}"#);
    let out = curie(&["check", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["checks"].as_array().unwrap().len(), 4);
    assert!(dir.path().join("o/check.json").is_file());
}

#[test]
fn perturbed_3j_table_fails_check() {
    let dir = tempfile::tempdir().unwrap();
    let task = make_square_rect_task(Deformation::SquareToRect).unwrap();
    let mut model = Model::new(&ModelConfig::default(), &task.input_signature(), 9).unwrap();
    let mut table = model.table().clone();
    let mut t = wigner_3j(1, 1, 2).unwrap();
    t.data.iter_mut().enumerate().for_each(|(i, v)| *v += 0.05 * (i as f64).sin());
    table.override_entry(t).unwrap();
    model.set_table(table);
    let ck = dir.path().join("bad.ckpt");
    std::fs::write(&ck, Checkpoint::from_model(&model).to_json()).unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"version": 1, "scenario": {"kind": "square_to_rect"}, "checkpoint": "bad.ckpt"}"#,
    );
    let out = curie(&["check", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stdout));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["checks"][0]["name"], "equivariance");
    assert_eq!(report["checks"][0]["passed"], false);
}

#[test]
fn perovskite_check_with_384_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "p.json",
        r#"{"version": 1, "scenario": {"kind": "perovskite", "pattern": "a+b-b-"}, "checks": {"samples": 10, "curie_models": 2}}"#,
    );
    let t0 = Instant::now();
    let out = curie(&["check", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(t0.elapsed() < Duration::from_secs(300));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["group_order"], 384);
}

#[test]
fn tables_dump() {
    let out = curie(&["tables", "--3j", "0,0,0"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "[[[1.0]]]");

    let a = curie(&["tables", "--lmax", "3", "--axis", "1,2,3", "--angle", "0.7", "--inversion"]);
    let b = curie(&["tables", "--lmax", "3", "--axis", "1,2,3", "--angle", "0.7", "--inversion"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);

    // sign convention fixtures of the 1 ⊗ 1 → 2 coupling
    let v: serde_json::Value = serde_json::from_slice(&curie(&["tables", "--3j", "1,1,2"]).stdout).unwrap();
    let at = |i: usize, j: usize, k: usize| v[i][j][k].as_f64().unwrap();
    assert!((at(0, 0, 2) - 0.18257418583505539).abs() < 1e-14);
    assert!((at(1, 1, 2) + 0.3651483716701107).abs() < 1e-14);
    assert!((at(2, 2, 4) + 0.316227766016838).abs() < 1e-14);
    assert_eq!(at(0, 0, 0), 0.0);

    assert_eq!(curie(&["tables", "--3j", "1,1,3"]).status.code(), Some(2));
    assert_eq!(curie(&["tables", "--d", "13"]).status.code(), Some(2));
}
