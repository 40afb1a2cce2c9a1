use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ktl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ktl")).args(args).current_dir(cwd).env_remove("KTL_DATA_ROOT").output().unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = ktl(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// First JSON object in the output, skipping leading status lines.
fn json_after(text: &str) -> Value {
    let start = text.find('{').unwrap();
    serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>().next().unwrap().unwrap()
}

fn synth(dir: &Path, name: &str) {
    ok(
        &["synth", "--output", name, "--students", "30", "--questions", "12", "--kcs", "5", "--kcs-per-question", "2", "--interactions", "12", "--seed", "3"],
        dir,
    );
}

const EXPERIMENT: &str = r#"
name = "cli"

[dataset]
source = "prepared"
path = "syn"

[split]
folds = 2
seed = 1

[window]
questions = 8

[defaults]
max_epochs = 2
patience = 1
d = 8
hidden = 8
attention_heads = 2
attention_blocks = 1
batch_size = 8
probe_samples = 5

[[models]]
id = "dkt"

[[models]]
id = "dkt-ml"

[[models]]
id = "akt-qm"
"#;

#[test]
fn prepare_stats_and_doubling() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "syn");
    let base = json_after(&ok(&["stats", "--data", "syn"], d));
    assert_eq!(base, json_after(&ok(&["stats", "--data", "syn"], d)));
    ok(&["prepare", "--dataset", "canonical", "--input", "syn/interactions.csv", "--output", "prep", "--corr-transform"], d);
    let prep = json_after(&ok(&["stats", "--data", "prep"], d));
    let corr = json_after(&ok(&["stats", "--data", "prep-corr"], d));
    assert_eq!(prep, base);
    assert_eq!(corr["num_kcs"].as_u64().unwrap(), 2 * base["num_kcs"].as_u64().unwrap());
    assert_eq!(corr["num_questions"], base["num_questions"]);
    assert_eq!(corr["avg_kcs_per_question"].as_f64().unwrap(), 2.0 * base["avg_kcs_per_question"].as_f64().unwrap());
}

#[test]
fn data_root_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "syn");
    let elsewhere = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ktl"))
        .args(["stats", "--data", "syn"])
        .current_dir(elsewhere.path())
        .env("KTL_DATA_ROOT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn error_categories_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ktl(&["stats", "--data", "missing"], d);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[io]:"));

    let out = ktl(&["stats", "--data", "x", "--bogus"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[usage]:"));

    std::fs::write(d.join("bad.csv"), "student_id,order,question_id,kc_ids,response\ns,0,q,k,7\n").unwrap();
    let out = ktl(&["prepare", "--dataset", "canonical", "--input", "bad.csv", "--output", "o"], d);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(ktl(&["--help"], d).status.code(), Some(0));
}

#[test]
fn train_evaluate_audit_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "syn");
    std::fs::write(d.join("exp.toml"), EXPERIMENT).unwrap();
    let table = ok(&["train", "--config", "exp.toml", "--output", "out"], d);
    for m in ["dkt", "dkt-ml", "akt-qm"] {
        assert!(table.contains(&format!("| {m} ")), "{table}");
    }

    let csv = ok(&["report", "--runs", "out/runs", "--format", "csv"], d);
    assert_eq!(csv.lines().count(), 4, "{csv}");
    assert!(d.join("out/runs/test_auc.svg").exists());

    let audit = ok(&["audit", "--checkpoint", "out/checkpoints/dkt-ml/fold0.json", "--data", "syn", "--samples", "20"], d);
    assert!(audit.contains("verdict: leak_free"), "{audit}");
    let audit = ok(&["audit", "--checkpoint", "out/checkpoints/dkt/fold0.json", "--data", "syn", "--samples", "20"], d);
    assert!(audit.contains("verdict: leaking"), "{audit}");

    let ck = "out/checkpoints/akt-qm/fold1.json";
    let agg = json_after(&ok(&["evaluate", "--checkpoint", ck, "--data", "syn", "--method", "aggregated-one-by-one"], d));
    let aio = json_after(&ok(&["evaluate", "--checkpoint", ck, "--data", "syn", "--method", "all-in-one", "--trace", "t.jsonl"], d));
    assert!((agg["auc"].as_f64().unwrap() - aio["auc"].as_f64().unwrap()).abs() <= 1e-6);
    assert!(d.join("t.jsonl").exists());

    let split = ok(&["evaluate", "--checkpoint", ck, "--data", "syn", "--method", "one-by-one", "--split", "out/split.json"], d);
    assert!(json_after(&split)["population"].as_u64().unwrap() > 0);
}

#[test]
fn mixed_windows_abort_with_fairness_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "syn");
    let text = EXPERIMENT.replace("id = \"dkt-ml\"", "id = \"dkt-ml\"\nwindow_questions = 4");
    std::fs::write(d.join("exp.toml"), text).unwrap();
    let out = ktl(&["train", "--config", "exp.toml", "--output", "out"], d);
    assert_eq!(out.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[fairness-violation]:"), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!d.join("out/runs").exists());
}
