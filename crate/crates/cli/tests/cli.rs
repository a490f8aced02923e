use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn phead(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phead"))
        .arg("--root")
        .arg(root)
        .args(args)
        .env_remove("PH_REGISTRY_ROOT")
        .output()
        .expect("spawn phead")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A registry with a tiny pretrained base and the toy dataset next to it.
fn setup(dir: &Path) {
    let (data, corpus) = (dir.join("toy.jsonl"), dir.join("corpus.txt"));
    ok(phead(
        dir,
        &["gen-toy", "--out", s(&data), "--train-per-class", "6", "--test-per-class", "2", "--corpus-out", s(&corpus), "--corpus-size", "150"],
    ));
    ok(phead(
        dir,
        &["pretrain", "--corpus", s(&corpus), "--d-model", "16", "--layers", "1", "--heads", "2", "--d-ff", "32", "--epochs", "1", "--seed", "3"],
    ));
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    setup(root);
    let data = root.join("toy.jsonl");
    assert!(root.join("base.pibm").exists());

    let out = ok(phead(root, &["train", "--user", "alice", "--data", s(&data), "--hidden-dim", "16", "--epochs", "2", "--negatives", "1"]));
    let v = json(&out);
    assert_eq!(v["command"], "train");
    assert!(root.join("users/alice/v1.piph").exists());

    let v = json(&ok(phead(root, &["eval", "--user", "alice", "--data", s(&data)])));
    let f1 = v["metrics"]["macro_f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));

    let v = json(&ok(phead(root, &["predict", "--user", "alice", "--text", "play some jazz", "--classes", "play_music,get_weather"])));
    let class = v["prediction"]["class"].as_str().unwrap();
    assert!(class == "play_music" || class == "get_weather");

    // a second train call becomes version 2
    ok(phead(root, &["train", "--user", "alice", "--data", s(&data), "--hidden-dim", "16", "--epochs", "1"]));
    assert!(root.join("users/alice/v2.piph").exists());
}

#[test]
fn pretraining_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.txt");
    fs::write(&corpus, "play some jazz\nwhat is the weather in oslo\nbook a table for two\nadd this song to my list\n").unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(phead(
            dir.path(),
            &["pretrain", "--corpus", s(&corpus), "--out", s(&out), "--d-model", "8", "--layers", "1", "--heads", "2", "--d-ff", "16", "--epochs", "2", "--seed", "5"],
        ));
        fs::read(out).unwrap()
    };
    assert_eq!(run("a.pibm"), run("b.pibm"));
}

#[test]
fn missing_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = phead(dir.path(), &["pretrain", "--corpus", s(&dir.path().join("nope.txt"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    // no base in an empty registry
    let out = phead(dir.path(), &["predict", "--user", "bob", "--text", "hi", "--classes", "a,b"]);
    assert!(!out.status.success());
}

#[test]
fn invalid_user_ids_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let data = dir.path().join("toy.jsonl");
    let out = phead(dir.path(), &["train", "--user", "../evil", "--data", s(&data), "--epochs", "1"]);
    assert!(!out.status.success());
    assert!(!dir.path().join("evil").exists());
}

fn data_rows(csv: &str) -> Vec<Vec<String>> {
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().unwrap();
    assert!(header.starts_with("hidden_dim,heads,per_class,epoch,seed"));
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn sweeps_write_one_row_per_cell_and_report_failures() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    setup(root);
    let data = root.join("toy.jsonl");
    let csv = root.join("one.csv");
    ok(phead(
        root,
        &["sweep", "--data", s(&data), "--hidden-dims", "8", "--heads", "2", "--per-class", "3", "--epochs", "1", "--seeds", "0", "--out", s(&csv)],
    ));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with('#'));
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 1);
    assert!(rows[0].contains(&"ok".to_string()), "{rows:?}");

    // 3 heads cannot split d_model 16: that cell fails, the other still runs
    let csv = root.join("mixed.csv");
    let out = phead(
        root,
        &["sweep", "--data", s(&data), "--hidden-dims", "8", "--heads", "2,3", "--per-class", "3", "--epochs", "1", "--seeds", "0", "--out", s(&csv)],
    );
    assert!(!out.status.success());
    let rows = data_rows(&fs::read_to_string(&csv).unwrap());
    assert_eq!(rows.len(), 2);
    assert_eq!(rows.iter().filter(|r| r.contains(&"failed".to_string())).count(), 1);
}

#[test]
fn cost_report_handles_zero_users_and_efficiency() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(phead(dir.path(), &["cost-report", "--users", "0", "--json"]));
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["command"], "cost-report");
    // with no users only the shared base is stored
    assert_eq!(v["report"]["ph_only"]["stored_params_total"], 109_000_000u64);
    assert_eq!(v["report"]["ph_only"]["train_params_total"], 0u64);
    assert_eq!(v["report"]["full_finetune"]["stored_params_total"], 0u64);

    let out = ok(phead(
        dir.path(),
        &["cost-report", "--pe-candidate", "97.05,5520000,22080000", "--pe-reference", "97.0,109000000,436000000"],
    ));
    let md = String::from_utf8_lossy(&out.stdout);
    assert!(md.contains("<!-- phead "));
    assert!(md.to_lowercase().contains("efficiency"), "{md}");

    let out = phead(dir.path(), &["cost-report", "--pe-candidate", "97,0,1", "--pe-reference", "97,1,1"]);
    assert!(!out.status.success());
}

#[test]
fn config_file_sections_may_be_partial() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, corpus, out) = (dir.path().join("run.json"), dir.path().join("c.txt"), dir.path().join("b.pibm"));
    fs::write(&cfg, r#"{"pretrain": {"epochs": 1, "model": {"d_model": 8, "n_heads": 2, "d_ff_base": 16}}}"#).unwrap();
    fs::write(&corpus, "play some jazz\nbook a table for two\nwhat is the weather\n").unwrap();
    let v = json(&ok(phead(dir.path(), &["--config", s(&cfg), "pretrain", "--corpus", s(&corpus), "--out", s(&out)])));
    assert_eq!(v["config"]["pretrain"]["model"]["d_model"], 8);
    assert!(out.exists());

    fs::write(&cfg, r#"{"train": {"epochz": 3}}"#).unwrap();
    assert!(!phead(dir.path(), &["--config", s(&cfg), "cost-report"]).status.success());
}
