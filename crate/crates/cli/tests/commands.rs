use std::path::{Path, PathBuf};
use std::process::Command;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn goalscan(args: &[&str], out: &Path) -> Run {
    let output = Command::new(env!("CARGO_BIN_EXE_goalscan"))
        .args(args)
        .arg("--output-dir")
        .arg(out)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .env_remove("OPENAI_API_KEY")
        .output()
        .expect("binary runs");
    Run {
        code: output.status.code().unwrap_or(-1),
        stdout: String::from_utf8(output.stdout).unwrap(),
        stderr: String::from_utf8(output.stderr).unwrap(),
    }
}

fn matrix_config() -> String {
    fixture("matrix.toml").display().to_string()
}

#[test]
fn split_reports_group_counts_and_is_reproducible() {
    let corpus = fixture("six_reports.csv");
    let args = ["--corpus", corpus.to_str().unwrap(), "--test-reports", "rep2,rep5", "split"];
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run = goalscan(&args, a.path());
    assert_eq!(run.code, 0, "{}", run.stderr);
    assert_eq!(run.stdout.trim(), "train: 12 passages from 4 reports; test: 6 passages from 2 reports");
    assert_eq!(goalscan(&args, b.path()).code, 0);
    for file in ["train.jsonl", "test.jsonl", "stats.json"] {
        assert_eq!(
            std::fs::read(a.path().join(file)).unwrap(),
            std::fs::read(b.path().join(file)).unwrap(),
            "{file}"
        );
    }
    let stats: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.path().join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["train"]["reports"], 4);
    assert_eq!(stats["test"]["reports"], 2);
    assert!(stats["config_fingerprint"].as_str().unwrap().len() == 16);
}

#[test]
fn eval_row_matches_golden_and_defaults_to_seven_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let run = goalscan(&["--config", &matrix_config(), "eval"], dir.path());
    assert_eq!(run.code, 0, "{}", run.stderr);
    let golden = std::fs::read_to_string(fixture("eval_row.golden")).unwrap();
    assert_eq!(run.stdout, golden);
    assert_eq!(std::fs::read_to_string(dir.path().join("eval_row.md")).unwrap(), golden);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["repeats"], 7);
    assert_eq!(report["report"]["per_run"].as_array().unwrap().len(), 7);
    assert_eq!(report["seed"], 7);
}

#[test]
fn similar_policy_needs_an_index() {
    let dir = tempfile::tempdir().unwrap();
    let run = goalscan(&["--config", &matrix_config(), "--policy", "similar", "eval"], dir.path());
    assert_eq!(run.code, 3, "{}", run.stderr);
    assert!(run.stderr.contains("index"));

    let index = dir.path().join("idx.jsonl");
    let idx = index.to_str().unwrap();
    let built = goalscan(&["--config", &matrix_config(), "--index", idx, "index"], dir.path());
    assert_eq!(built.code, 0, "{}", built.stderr);
    let run = goalscan(&["--config", &matrix_config(), "--policy", "similar", "--index", idx, "eval"], dir.path());
    assert_eq!(run.code, 0, "{}", run.stderr);
    assert!(run.stdout.starts_with("| Similar |"));
}

#[test]
fn config_and_backend_failures_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = goalscan(&["--corpus", "/nonexistent/corpus.jsonl", "stats"], dir.path());
    assert_eq!(missing.code, 2);
    // The HTTP backend needs a credential from the environment.
    let corpus = fixture("matrix_corpus.jsonl");
    let no_key = goalscan(&["--test", corpus.to_str().unwrap(), "eval"], dir.path());
    assert_eq!(no_key.code, 2, "{}", no_key.stderr);
    assert!(no_key.stderr.contains("OPENAI_API_KEY"));
    // A scenario without classification answers fails at the backend.
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let backend = goalscan(
        &["--test", corpus.to_str().unwrap(), "--backend", "scripted", "--scenario", empty.to_str().unwrap(), "eval"],
        dir.path(),
    );
    assert_eq!(backend.code, 4, "{}", backend.stderr);
}

#[test]
fn tune_writes_reusable_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let run = goalscan(&["--config", &matrix_config(), "tune"], dir.path());
    assert_eq!(run.code, 0, "{}", run.stderr);
    let evolution = std::fs::read_to_string(dir.path().join("evolution.txt")).unwrap();
    assert_eq!(evolution.matches("\nRewrite ").count(), 1, "{evolution}");
    let events = std::fs::read_to_string(dir.path().join("events.jsonl")).unwrap();
    assert_eq!(events.lines().count(), 1);

    let again = tempfile::tempdir().unwrap();
    assert_eq!(goalscan(&["--config", &matrix_config(), "tune"], again.path()).code, 0);
    assert_eq!(std::fs::read_to_string(again.path().join("events.jsonl")).unwrap(), events);

    // The tuned instruction fixes the test-set false positive.
    for (source, file) in [("tuned", "evolution.txt"), ("file", "tuned_instruction.txt")] {
        let path = dir.path().join(file);
        let eval_dir = tempfile::tempdir().unwrap();
        let run = goalscan(
            &["--config", &matrix_config(), "--instruction", source, "--instruction-path", path.to_str().unwrap(), "eval"],
            eval_dir.path(),
        );
        assert_eq!(run.code, 0, "{}", run.stderr);
        assert_eq!(run.stdout, "| Zero-shot | 100.0 | 100.0 | 100.0 | 100.0 |\n");
    }
}

#[test]
fn large_margin_keeps_the_initial_instruction() {
    let dir = tempfile::tempdir().unwrap();
    let run = goalscan(&["--config", &matrix_config(), "--epsilon", "0.5", "tune"], dir.path());
    assert_eq!(run.code, 0, "{}", run.stderr);
    let result: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("tune_result.json")).unwrap()).unwrap();
    let events = result["events"].as_array().unwrap();
    assert!(!events.is_empty());
    assert!(events.iter().all(|e| e["accepted"] == false));
    assert_eq!(result["final_instruction"], result["initial_instruction"]);
}

#[test]
fn aborted_tuning_leaves_a_marker() {
    let dir = tempfile::tempdir().unwrap();
    // Classification answers only: the reflection turn has no scripted reply.
    let scenario = dir.path().join("partial.jsonl");
    let lines: String = std::fs::read_to_string(fixture("matrix_scenario.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| !l.contains("last_user_contains"))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(&scenario, lines).unwrap();
    let run = goalscan(
        &["--config", &matrix_config(), "--scenario", scenario.to_str().unwrap(), "tune"],
        dir.path(),
    );
    assert_eq!(run.code, 4, "{}", run.stderr);
    assert!(dir.path().join("TUNE_ABORTED").exists());
    assert!(dir.path().join("events.jsonl").exists());
}

#[test]
fn render_reproduces_matrix_tables() {
    let dir = tempfile::tempdir().unwrap();
    let run = goalscan(&["--config", &matrix_config(), "--repeats", "1", "matrix"], dir.path());
    assert_eq!(run.code, 0, "{}", run.stderr);
    let json = dir.path().join("matrix.json");
    for (table, md, csv) in [("1", "table1.md", "table1.csv"), ("2", "table2.md", "table2.csv")] {
        let r = goalscan(&["render", json.to_str().unwrap(), "--table", table], dir.path());
        assert_eq!(r.stdout, std::fs::read_to_string(dir.path().join(md)).unwrap());
        let r = goalscan(&["render", json.to_str().unwrap(), "--table", table, "--format", "csv"], dir.path());
        assert_eq!(r.stdout, std::fs::read_to_string(dir.path().join(csv)).unwrap());
    }
}
