mod common;

use std::path::Path;
use std::process::{Command, Output};

use xshot::benchmark::{PerGroup, SplitSpec};
use xshot::model::{FrequencyGroup, LabelEntry, LabelSpace, RawInstance};

fn xshot(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xshot"))
        .args(args)
        .current_dir(dir)
        .env_remove("XSHOT_BACKEND_URL")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn setup(dir: &Path) {
    common::write_corpus(dir, &common::corpus(10, 24, 20));
    let spec = SplitSpec {
        group_label_counts: PerGroup::new(3, 3, 3),
        train_quota_per_label: PerGroup::new(12, 3, 0),
        dev_per_label: 4,
        test_per_label: 6,
        min_instances_per_label: 0,
        includes_none: true,
    };
    xshot::io::write_json(&dir.join("spec.json"), &spec).unwrap();
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&xshot(dir.path(), &["--help"])), 0);
    assert_eq!(code(&xshot(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&xshot(dir.path(), &["split", "--dataset", "raw.jsonl"])), 1);
}

#[test]
fn step_by_step_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    ok(xshot(dir, &["split", "--dataset", "raw.jsonl", "--spec", "spec.json", "--seed", "3", "--out", "bench"]));
    assert!(dir.join("bench/manifest.json").exists());
    for split in ["dev", "test"] {
        let out = format!("{split}.triplets.jsonl");
        ok(xshot(dir, &["triplets", "--benchmark", "bench", "--template", "maven-a", "--split", split, "--out", &out]));
        let scores = format!("{split}.scores.jsonl");
        ok(xshot(dir, &["score", "--triplets", &out, "--backend", "hash-mock", "--out", &scores]));
    }
    let first = std::fs::read(dir.join("test.scores.jsonl")).unwrap();
    ok(xshot(dir, &["score", "--triplets", "test.triplets.jsonl", "--backend", "hash-mock", "--out", "again.jsonl"]));
    assert_eq!(std::fs::read(dir.join("again.jsonl")).unwrap(), first, "hash mock differs across processes");

    ok(xshot(dir, &["tune", "--scores", "dev.scores.jsonl", "--benchmark", "bench", "--out", "tune.json"]));
    let out = ok(xshot(
        dir,
        &["eval", "--scores", "test.scores.jsonl", "--benchmark", "bench", "--threshold", "tune.json", "--report", "report.json"],
    ));
    let table = stdout(&out);
    for column in ["all", "freq", "few", "zero"] {
        assert!(table.contains(column), "{table}");
    }
    let report: xshot::model::EvaluationReport = xshot::io::read_json(&dir.join("report.json")).unwrap();
    assert_eq!(report.counts.all, 60);

    ok(xshot(dir, &["eval", "--scores", "dev.scores.jsonl", "--benchmark", "bench", "--threshold", "0.7", "--report", "dev.json"]));
    let dev: xshot::model::EvaluationReport = xshot::io::read_json(&dir.join("dev.json")).unwrap();
    assert_eq!(dev.counts.all, 40);

    let partial: Vec<xshot::model::ScoreRecord> = xshot::io::read_jsonl(&dir.join("test.scores.jsonl")).unwrap();
    xshot::io::write_jsonl(&dir.join("partial.jsonl"), &partial[..partial.len() - 1]).unwrap();
    let out = xshot(dir, &["eval", "--scores", "partial.jsonl", "--benchmark", "bench", "--threshold", "0.7"]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unreachable_backend_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    ok(xshot(dir, &["split", "--dataset", "raw.jsonl", "--spec", "spec.json", "--out", "bench"]));
    ok(xshot(dir, &["triplets", "--benchmark", "bench", "--template", "maven-a", "--out", "t.jsonl"]));
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("http://127.0.0.1:{port}");
    let out = xshot(dir, &["score", "--triplets", "t.jsonl", "--backend", &url, "--out", "s.jsonl"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn run_reports_dependency_errors_with_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let config = r#"
seed = 1
out_dir = "out"

[dataset]
path = "raw.jsonl"
spec = "spec.json"
preset = "maven"

[backends]
score = "hash-mock"
complete = "echo-mock"
"#;
    std::fs::write(dir.join("run.toml"), config).unwrap();
    let out = xshot(dir, &["run", "--config", "run.toml", "--stages", "eval"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    ok(xshot(dir, &["run", "--config", "run.toml", "--stages", "all"]));
    assert!(dir.join("out/run.json").exists());
    assert_eq!(code(&xshot(dir, &["run", "--config", "run.toml", "--stages", "split,bogus"])), 1);
}

#[test]
fn validate_flags_bad_records() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let space = LabelSpace::new(
        vec![LabelEntry {
            name: "A".into(),
            group: FrequencyGroup::Freq,
        }],
        false,
    )
    .unwrap();
    xshot::io::write_json(&dir.join("labels.json"), &space).unwrap();
    let good = vec![RawInstance::new("1", "t", Some("A")), RawInstance::new("2", "t", None)];
    xshot::io::write_jsonl(&dir.join("good.jsonl"), &good).unwrap();
    ok(xshot(dir, &["validate", "--dataset", "good.jsonl", "--labels", "labels.json"]));

    let bad = vec![RawInstance::new("1", "t", Some("A")), RawInstance::new("1", "t", Some("X"))];
    xshot::io::write_jsonl(&dir.join("bad.jsonl"), &bad).unwrap();
    let out = xshot(dir, &["validate", "--dataset", "bad.jsonl", "--labels", "labels.json"]);
    assert_eq!(code(&out), 1);
    let text = format!("{}{}", stdout(&out), String::from_utf8_lossy(&out.stderr));
    assert!(text.contains("duplicate") && text.contains("\"X\""), "{text}");
}

#[test]
fn ablation_schedule_prints_seven_points() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(xshot(dir.path(), &["ablate", "schedule", "--mode", "vary-tasks", "--available", "700"]));
    let schedule: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let points = schedule.as_array().unwrap();
    assert_eq!(points.len(), 7);
    assert_eq!(points[6]["total"], 70_000);
}
