use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

fn cramf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cramf"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cramf(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const STATEMENT: &str = "Show that the open ball in a metric space is contained in the closed ball.";

#[test]
fn mock_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    let export = fixture("export");
    let problems = fixture("problems.jsonl");

    let table = ok(&["ingest", "--export", s(&export), "--out", s(&d("kb")), "--report", s(&d("ingest.json"))]);
    assert!(table.contains("kept (def/class/structure)         8"), "{table}");
    let report: Value = serde_json::from_slice(&fs::read(d("ingest.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["kept"], 8);
    assert_eq!(report["report"]["missing_doc"], 2);
    assert_eq!(ok(&["validate", "--kb", s(&d("kb"))]), "0 violations\n");

    ok(&["populate", "--kb", s(&d("kb")), "--out", s(&d("pop"))]);
    assert_eq!(ok(&["validate", "--kb", s(&d("pop"))]), "0 violations\n");
    let skips: Value = serde_json::from_slice(&fs::read(d("pop.skips.json")).unwrap()).unwrap();
    assert_eq!(skips["completed"], 8);
    assert!(!d("pop.checkpoint.jsonl").exists());
    let pop = fs::read_to_string(d("pop")).unwrap();
    assert_eq!(pop.lines().filter(|l| l.contains("\"record\":\"concept\"")).count(), 8);
    assert!(!pop.contains("\"pending\""));

    let indexed = ok(&["index", "--kb", s(&d("pop")), "--side", "concept", "--out", s(&d("idx"))]);
    assert!(indexed.starts_with("indexed 8 unit(s), 64 dimension(s)"), "{indexed}");

    let first = ok(&[
        "retrieve", "--kb", s(&d("pop")), "--index", s(&d("idx")), "--statement", STATEMENT,
        "--emit-prompt", s(&d("p1")), "--trace", s(&d("trace")), "--record", s(&d("tape")),
    ]);
    assert_eq!(first.lines().count(), 3, "{first}");
    let prompt = fs::read_to_string(d("p1")).unwrap();
    assert!(prompt.starts_with("The following Mathlib definitions"));
    let trace = fs::read_to_string(d("trace")).unwrap();
    assert!(trace.contains("final_rerank"));

    // Same run answered entirely from the tape.
    let statement_file = d("statement.txt");
    fs::write(&statement_file, STATEMENT).unwrap();
    let replayed = ok(&[
        "retrieve", "--kb", s(&d("pop")), "--index", s(&d("idx")), "--statement", s(&statement_file),
        "--emit-prompt", s(&d("p2")), "--replay", s(&d("tape")),
    ]);
    assert_eq!(replayed, first);
    assert_eq!(fs::read(d("p2")).unwrap(), prompt.as_bytes());

    let baseline = ok(&["retrieve", "--kb", s(&d("pop")), "--baseline", "bm25", "--statement", "open ball metric space"]);
    assert_eq!(baseline.lines().next().unwrap().split_whitespace().last(), Some("Metric.ball"));

    let eval_args = |report: &Path| {
        vec![
            "eval".to_string(), "--kb".into(), s(&d("pop")).into(), "--index".into(), s(&d("idx")).into(),
            "--problems".into(), s(&problems).into(), "--k".into(), "2".into(), "--control".into(),
            "--report".into(), s(report).into(),
        ]
    };
    let a = eval_args(&d("r1.json"));
    let table = ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(table.contains("+CRAMF") && table.contains("CPR@2"), "{table}");
    let run: Value = serde_json::from_slice(&fs::read(d("r1.json")).unwrap()).unwrap();
    let r = &run["report"];
    assert_eq!(r["n"], 3);
    assert_eq!(r["k"], 2);
    // The mock compiler accepts everything.
    assert_eq!(r["cpr_at_k"], 1.0);
    assert_eq!(run["control"]["cpr_at_k"], 1.0);
    assert_eq!(run["relative_gain"]["cpr"], 0.0);
    assert!(r["far_at_k"].as_f64().unwrap() <= r["cpr_at_k"].as_f64().unwrap());
    assert_eq!(run["records"].as_array().unwrap().len(), 3);

    let b = eval_args(&d("r2.json"));
    ok(&b.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(fs::read(d("r1.json")).unwrap(), fs::read(d("r2.json")).unwrap());
}

#[test]
fn populate_output_is_independent_of_batching() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    ok(&["ingest", "--export", s(&fixture("export")), "--out", s(&d("kb"))]);
    ok(&["populate", "--kb", s(&d("kb")), "--out", s(&d("full"))]);

    ok(&[
        "populate", "--kb", s(&d("kb")), "--out", s(&d("scratch")), "--checkpoint", s(&d("ck")),
        "--set", "populate.checkpoint_every=4", "--workers", "1",
    ]);
    assert!(!d("ck").exists());
    let full = fs::read_to_string(d("full")).unwrap();
    assert_eq!(fs::read_to_string(d("scratch")).unwrap(), full);
}

#[test]
fn usage_and_config_errors_exit_2() {
    let out = cramf(&["retrieve", "--statement", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(cramf(&["frobnicate"]).status.code(), Some(2));
    let out = cramf(&["--set", "retrieval.final_top=9", "config", "show", "--effective"]);
    assert_eq!(out.status.code(), Some(2));
    let out = cramf(&["--set", "nonsense=1", "config", "show"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(cramf(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_show_reports_layers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[retrieval]\nmax_keywords = 6\nmax_concepts = 2\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cramf"))
        .args(["--config", s(&cfg), "--set", "retrieval.max_concepts=3", "config", "show", "--effective"])
        .env("CRAMF_RETRIEVAL__MAX_CONCEPTS", "4")
        .env("CRAMF_EVAL__ATTEMPTS", "5")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for line in [
        "retrieval.max_keywords = 6  # file",
        "retrieval.max_concepts = 3  # flag",
        "eval.attempts = 5  # env",
        "retrieval.final_top = 3  # default",
    ] {
        assert!(text.lines().any(|l| l == line), "missing {line:?} in\n{text}");
    }
}

#[test]
fn validate_reports_violations() {
    let dir = tempfile::tempdir().unwrap();
    let kb = dir.path().join("kb");
    ok(&["ingest", "--export", s(&fixture("export")), "--out", s(&kb)]);
    let text = fs::read_to_string(&kb).unwrap();
    // A link to a concept that does not exist, ahead of the end record.
    let mut lines: Vec<&str> = text.lines().collect();
    let mut end: Value = serde_json::from_str(lines.pop().unwrap()).unwrap();
    end["entities"] = (end["entities"].as_u64().unwrap() + 1).into();
    let end = end.to_string();
    lines.push(r#"{"record":"link","concept_id":"con-missing","description_ids":["desc-missing"]}"#);
    lines.push(&end);
    let broken = lines.join("\n") + "\n";
    fs::write(&kb, broken).unwrap();
    let out = cramf(&["validate", "--kb", s(&kb)]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(!stdout.ends_with("0 violations\n"), "{stdout}");
    assert!(stdout.trim_end().ends_with("violations"));
}
