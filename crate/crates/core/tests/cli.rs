mod common;

use std::path::Path;
use std::process::{Command, Output};

use rarematch::backbone::{save_checkpoint, BackboneSpec, ModelState};
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rarematch")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn toy_eval_files(dir: &Path) {
    std::fs::write(dir.join("scores.csv"), "id,score\na,0.9\nb,0.8\nc,0.7\nd,0.1\n").unwrap();
    let gt: String = [("a", 1), ("b", 0), ("c", 1), ("d", 0)]
        .iter()
        .map(|(id, l)| format!("{{\"id\":\"{id}\",\"gt_label\":{l},\"split\":\"unlabelled\"}}\n"))
        .collect();
    std::fs::write(dir.join("gt.jsonl"), gt).unwrap();
}

#[test]
fn eval_reports_hand_computed_values() {
    let dir = tempfile::tempdir().unwrap();
    toy_eval_files(dir.path());
    let out = run(&["eval", "--scores", p(&dir.path().join("scores.csv")), "--gt", p(&dir.path().join("gt.jsonl")), "--at", "50"]);
    let report: Value = serde_json::from_str(&ok(&out)).unwrap();
    assert_eq!(report["auroc"], 0.75);
    let at_50 = report["efficiency"].as_array().unwrap().iter().find(|e| e[0] == 50.0).unwrap();
    assert_eq!(at_50[1], 50.0);
}

#[test]
fn config_file_supplies_missing_flags() {
    let dir = tempfile::tempdir().unwrap();
    toy_eval_files(dir.path());
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, serde_json::json!({"eval": {"gt": dir.path().join("gt.jsonl")}}).to_string()).unwrap();
    let out = run(&["--config", p(&cfg), "eval", "--scores", p(&dir.path().join("scores.csv"))]);
    let report: Value = serde_json::from_str(&ok(&out)).unwrap();
    assert_eq!(report["auroc"], 0.75);

    std::fs::write(&cfg, r#"{"eval": {"bogus": 1}}"#).unwrap();
    assert_eq!(run(&["--config", p(&cfg), "eval"]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    toy_eval_files(dir.path());
    let cases: Vec<Vec<&str>> = vec![
        vec!["frobnicate"],
        vec!["eval", "--scores", "x.csv"],
        vec!["bench", "--protocol", "imagenet"],
        vec!["init", "--session", "s", "--synthetic", "miniimagenet-like", "--catalog", "c.jsonl"],
        vec!["score", "--topk", "ten"],
    ];
    for args in cases {
        assert_eq!(run(&args).status.code(), Some(2), "{args:?}");
    }
    let missing = run(&["eval", "--scores", "/nonexistent/s.csv", "--gt", p(&dir.path().join("gt.jsonl"))]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn bench_without_cycles_reports_untrained_model() {
    let out = run(&["bench", "--seeds", "1", "--cycles", "0", "--size", "16"]);
    let table = ok(&out);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "seed,auroc,auprc,precision_top_0.1,precision_top_1,efficiency_at_1");
    assert!(lines[1].starts_with("42,"), "{table}");
    assert!(lines.last().unwrap().starts_with("mean,"));
}

#[test]
fn ingest_then_score() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = common::criteria::write_png_catalog(&dir.path().join("data"), 40, 0.25, 3);
    let cache = dir.path().join("cache");
    ok(&run(&["ingest", "--catalog", p(&catalog), "--out", p(&cache), "--size", "16", "--shard-size", "16"]));

    let state = ModelState::new(BackboneSpec { widths: vec![4, 8], ..BackboneSpec::with_input(3, 16, 16) }, 1).unwrap();
    let ckpt = dir.path().join("m.amck");
    save_checkpoint(&ckpt, &state, &Value::Null).unwrap();
    let (scores, topk) = (dir.path().join("scores.csv"), dir.path().join("topk.csv"));
    let score = |workers: &str| {
        ok(&run(&[
            "score", "--checkpoint", p(&ckpt), "--shards", p(&cache), "--topk", "5", "--out", p(&scores), "--topk-out",
            p(&topk), "--workers", workers,
        ]));
        (std::fs::read(&scores).unwrap(), std::fs::read(&topk).unwrap())
    };
    let one = score("1");
    let three = score("3");
    assert_eq!(one, three);
    assert_eq!(String::from_utf8_lossy(&one.0).lines().count(), 41);
    assert_eq!(String::from_utf8_lossy(&one.1).lines().count(), 6);

    let wrong = ModelState::new(BackboneSpec { widths: vec![4], ..BackboneSpec::with_input(3, 32, 32) }, 1).unwrap();
    save_checkpoint(&ckpt, &wrong, &Value::Null).unwrap();
    assert_eq!(run(&["score", "--checkpoint", p(&ckpt), "--shards", p(&cache)]).status.code(), Some(1));
}

#[test]
fn init_and_train_with_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let session = dir.path().join("s");
    let cfg = dir.path().join("session.json");
    std::fs::write(
        &cfg,
        r#"{"backbone": {"channels": 3, "height": 16, "width": 16, "widths": [4, 8]}, "train": {"batch_size": 4, "mu": 2}}"#,
    )
    .unwrap();
    ok(&run(&[
        "init", "--session", p(&session), "--synthetic", "galaxymnist-like", "--size", "16", "--iters", "3", "--session-config",
        p(&cfg),
    ]));
    assert!(session.join("checkpoint.amck").exists());
    ok(&run(&["train", "--session", p(&session), "--cycles", "1", "--oracle"]));
    let saved: Value = serde_json::from_slice(&std::fs::read(session.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved["cycle"], 1);
    assert!(session.join("train_log_cycle_1.csv").exists());
    assert!(session.join("metrics_cycle_1.json").exists());
    let labels = std::fs::read_to_string(session.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().filter(|l| l.contains("cycle-1")).count(), 20);
}
