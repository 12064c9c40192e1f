use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "seed": 3,
        "artifacts_dir": dir.join("art"),
        "meta": {"n": 200, "held_out_tasks": 2},
        "sde": {"steps": 10},
        "score": {"model": {"d_model": 8, "heads": 2, "blocks": 1, "time_dim": 8}, "train": {"steps": 5, "batch": 8}},
        "predictors": {"model": {"d_model": 8, "heads": 2, "blocks": 1, "time_dim": 8, "d_embed": 8}, "train": {"steps": 5, "batch": 8}},
        "sampler": {"baseline_batch": 6, "phase_batch": 4, "chunk": 4},
        "tuner": {"budget": 2, "rungs": [{"chains": 2, "steps": 3}], "tasks": 1}
    });
    let path = dir.join("cfg.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn mogen(cfg: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mogen"))
        .arg("--config")
        .arg(cfg)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(cfg: &Path, args: &[&str]) -> String {
    let out = mogen(cfg, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run_dir(dir: &Path) -> PathBuf {
    let mut entries: Vec<_> = std::fs::read_dir(dir.join("art")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(entries.len(), 1);
    entries.pop().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    ok(&cfg, &["metadataset"]);
    ok(&cfg, &["train-score"]);
    let preds = ok(&cfg, &["train-predictors"]);
    assert!(preds.contains("acc_denoised"));
    ok(&cfg, &["tune", "--regime", "efficient"]);
    ok(&cfg, &["tune", "--regime", "accurate"]);
    let run = run_dir(tmp.path());
    let eff = run.join("scales_efficient.json");
    let acc = run.join("scales_accurate.json");
    ok(&cfg, &["generate", "--mode", "diffusionnag"]);
    ok(
        &cfg,
        &["generate", "--mode", "stretched", "--scales", eff.to_str().unwrap(), "--scales", acc.to_str().unwrap()],
    );
    ok(&cfg, &["select"]);
    ok(&cfg, &["evaluate"]);
    ok(&cfg, &["report"]);

    for f in [
        "meta.jsonl",
        "tasks.json",
        "score.mgn",
        "predictors/predictors.json",
        "batch_diffusionnag.jsonl",
        "batch_stretched.jsonl",
        "selection.json",
        "evaluation.json",
        "evaluation.md",
        "fronts/front_params.csv",
        "fronts/front_macs.csv",
        "fronts/front_latency.csv",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let hash = run.file_name().unwrap().to_str().unwrap().to_string();
    let sel = read_json(&run.join("selection.json"));
    assert!(sel["provenance"]["config_hash"].as_str().unwrap().starts_with(&hash));
    assert_eq!(sel["provenance"]["seed"], 3);
    let tuned = read_json(&eff);
    let k_acc = tuned["scales"]["k_acc"].as_f64().unwrap();
    assert!((1000.0..=5000.0).contains(&k_acc));

    let batch = std::fs::read_to_string(run.join("batch_stretched.jsonl")).unwrap();
    let header: Value = serde_json::from_str(batch.lines().next().unwrap()).unwrap();
    assert_eq!(header["scales"]["efficient"], tuned["scales"]);
    assert_eq!(batch.lines().count(), 1 + 8);

    let csv = std::fs::read_to_string(run.join("fronts/front_params.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "arch_hash,predicted_acc,oracle_acc,params,macs,latency_ms,phase,on_front,pick");
    let eval = read_json(&run.join("evaluation.json"));
    assert_eq!(eval["rows"].as_array().unwrap().len(), 1 + 3 * 3);
}

#[test]
fn generation_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    ok(&cfg, &["metadataset"]);
    ok(&cfg, &["train-score"]);
    ok(&cfg, &["train-predictors"]);
    let run = run_dir(tmp.path());
    let a = run.join("a.jsonl");
    let b = run.join("b.jsonl");
    let c = run.join("c.jsonl");
    ok(&cfg, &["generate", "--mode", "stretched", "--out", a.to_str().unwrap()]);
    ok(&cfg, &["generate", "--mode", "stretched", "--out", b.to_str().unwrap()]);
    ok(&cfg, &["generate", "--mode", "stretched", "--seed", "4", "--out", c.to_str().unwrap()]);
    let read = |p: &Path| std::fs::read_to_string(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn missing_artifacts_exit_with_two_and_a_hint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = mogen(&cfg, &["train-score"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("mogen metadataset"), "{err}");

    ok(&cfg, &["metadataset"]);
    let out = mogen(&cfg, &["generate", "--mode", "diffusionnag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-score"));
}

#[test]
fn bad_configs_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        r#"{"spcae": "nb201"}"#,
        r#"{"sde": {"sigma_min": 10.0}}"#,
        r#"{"score": {"model": {"d_model": 10, "heads": 3}}}"#,
        r#"{"tuner": {"budget": 0}}"#,
        "not json",
    ];
    for (i, text) in cases.iter().enumerate() {
        let path = tmp.path().join(format!("bad{i}.json"));
        std::fs::write(&path, text).unwrap();
        let out = mogen(&path, &["metadataset"]);
        assert_eq!(out.status.code(), Some(2), "{text}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = mogen(&tmp.path().join("absent.json"), &["metadataset"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    assert_eq!(mogen(&cfg, &["generate"]).status.code(), Some(2));
    assert_eq!(mogen(&cfg, &["tune", "--regime", "sideways"]).status.code(), Some(2));
    assert_eq!(mogen(&cfg, &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn space_flag_changes_the_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    ok(&cfg, &["metadataset", "--n", "20"]);
    ok(&cfg, &["--space", "mbv3", "metadataset", "--n", "20"]);
    assert_eq!(std::fs::read_dir(tmp.path().join("art")).unwrap().count(), 2);
}

#[test]
fn runtime_failures_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    ok(&cfg, &["metadataset"]);
    let run = run_dir(tmp.path());
    std::fs::write(run.join("score.mgn"), b"garbage").unwrap();
    std::fs::write(run.join("score.json"), b"{}").unwrap();
    assert_eq!(mogen(&cfg, &["generate", "--mode", "diffusionnag"]).status.code(), Some(3));
}
