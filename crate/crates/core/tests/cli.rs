mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::fixture;
use lexcheck::corpus::{estimate_tokens, split_sentences, SourceDocument};
use serde_json::Value;

fn lexcheck(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lexcheck"))
        .args(args)
        .env_remove("LEXCHECK_CONFIG")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn json_lines(path: &Path) -> Vec<Value> {
    read(path).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn check_dpa(out_dir: &Path, granularity: &str, script: &str, extra: &[&str]) -> Output {
    let artifact = fixture("dpa/dpa_acme.txt");
    let rules = fixture("gdpr_art28_demo.jsonl");
    let script = fixture(&format!("dpa/{script}"));
    let mut args = vec![
        "check",
        "--artifact",
        p(&artifact),
        "--rules",
        p(&rules),
        "--granularity",
        granularity,
        "--stub-script",
        p(&script),
        "--out-dir",
        p(out_dir),
    ];
    args.extend_from_slice(extra);
    lexcheck(&args)
}

#[test]
fn version_is_machine_readable() {
    let out = lexcheck(&["--version"]);
    ok(&out);
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), format!("lexcheck {}", env!("CARGO_PKG_VERSION")));
}

#[test]
fn segment_empty_file_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    let out = lexcheck(&["segment", "--input", p(&empty), "--out", p(&dir.path().join("o.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty document"));
    assert!(!dir.path().join("o.jsonl").exists());
}

#[test]
fn tiny_budget_cuts_at_sentence_edges() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture("dpa/dpa_acme.txt");
    let out_path = dir.path().join("passages.jsonl");
    ok(&lexcheck(&[
        "segment", "--input", p(&input), "--granularity", "paragraph", "--budget", "45", "--out", p(&out_path),
    ]));
    let passages = json_lines(&out_path);
    let doc: SourceDocument =
        lexcheck::corpus::parse_document("dpa_acme", &read(&input), lexcheck::corpus::DocumentFormat::Plain).unwrap();
    let sentences: Vec<String> = split_sentences(&doc).into_iter().map(|p| p.text).collect();
    // every passage is a run of whole sentences
    let mut joined = Vec::new();
    for passage in &passages {
        let text = passage["text"].as_str().unwrap();
        assert!(passage["token_estimate"].as_u64().unwrap() <= 45);
        assert_eq!(estimate_tokens(text) as u64, passage["token_estimate"].as_u64().unwrap());
        joined.push(lexcheck::corpus::normalize_whitespace(text));
    }
    assert!(passages.len() > doc.blocks.len());
    assert_eq!(joined.join(" "), sentences.join(" "));
    for s in &sentences {
        assert!(joined.iter().any(|j| j.contains(s.as_str())));
    }
}

#[test]
fn classify_replays_the_golden_labels() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("labels.jsonl");
    let ledger = dir.path().join("ledger.jsonl");
    ok(&lexcheck(&[
        "classify",
        "--input",
        p(&fixture("classify/food_rules.txt")),
        "--concepts",
        p(&fixture("food_safety_concepts.jsonl")),
        "--stub-script",
        p(&fixture("classify/stub_classify.jsonl")),
        "--out",
        p(&out_path),
        "--ledger",
        p(&ledger),
    ]));
    assert_eq!(read(&out_path), read(&fixture("classify/golden_labels.jsonl")));
    assert_eq!(json_lines(&ledger).len(), 10);
}

#[test]
fn keyword_only_runs_the_gazetteer_alone() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("labels.jsonl");
    ok(&lexcheck(&[
        "classify",
        "--keyword-only",
        "--input",
        p(&fixture("classify/food_rules.txt")),
        "--concepts",
        p(&fixture("food_safety_concepts.jsonl")),
        "--out",
        p(&out_path),
    ]));
    assert_eq!(read(&out_path), read(&fixture("classify/golden_keyword_only.jsonl")));
}

#[test]
fn classify_without_concepts_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = lexcheck(&[
        "classify",
        "--keyword-only",
        "--input",
        p(&fixture("classify/food_rules.txt")),
        "--concepts",
        p(&dir.path().join("missing.jsonl")),
        "--out",
        p(&dir.path().join("labels.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn paragraph_check_flags_the_missing_rule() {
    let dir = tempfile::tempdir().unwrap();
    ok(&check_dpa(dir.path(), "paragraph", "stub_paragraph_aware.jsonl", &[]));
    let report: Value = serde_json::from_str(&read(&dir.path().join("report.json"))).unwrap();
    // coverage worked out from the script: paragraph k+1 answers rule k for
    // R1..R6, paragraph 7 answers R8, the rest answer R99
    let expected = serde_json::json!({
        "R1": ["dpa_acme#1"], "R2": ["dpa_acme#2"], "R3": ["dpa_acme#3"], "R4": ["dpa_acme#4"],
        "R5": ["dpa_acme#5"], "R6": ["dpa_acme#6"], "R8": ["dpa_acme#7"]
    });
    assert_eq!(report["per_rule"], expected);
    assert_eq!(report["uncovered_rules"], serde_json::json!(["R7"]));
    assert_eq!(report["totals"]["not_applicable"], 3);
    assert_eq!(report["findings"].as_array().unwrap().len(), 10);
    let md = read(&dir.path().join("report.md"));
    assert!(md.contains("- **R7** (GDPR Art. 28(3)(g)): At the end of the provision of services"));
    assert_eq!(json_lines(&dir.path().join("ledger.jsonl")).len(), 10);
}

#[test]
fn sentence_check_uses_provision_units() {
    let dir = tempfile::tempdir().unwrap();
    ok(&check_dpa(dir.path(), "sentence", "stub_sentence_blind.jsonl", &[]));
    let report: Value = serde_json::from_str(&read(&dir.path().join("report.json"))).unwrap();
    assert_eq!(report["findings"].as_array().unwrap().len(), 19);
    assert_eq!(report["per_rule"]["R6"], serde_json::json!(["dpa_acme:5:0", "dpa_acme:6:0", "dpa_acme:6:1"]));
    assert_eq!(report["uncovered_rules"], serde_json::json!(["R7"]));
}

#[test]
fn unreachable_endpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    drop(listener);
    let out = lexcheck(&[
        "check",
        "--artifact",
        p(&fixture("dpa/dpa_acme.txt")),
        "--rules",
        p(&fixture("gdpr_art28_demo.jsonl")),
        "--backend",
        "http",
        "--endpoint",
        &url,
        "--max-attempts",
        "2",
        "--base-backoff-ms",
        "1",
        "--out-dir",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn parse_failures_over_the_limit_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("prose.jsonl");
    std::fs::write(&script, "{\"contains\": \"Text:\", \"response\": \"The clause looks fine to me.\"}\n").unwrap();
    let out_dir = dir.path().join("out");
    let args = |limit: &'static str| {
        vec![
            "check".to_string(),
            "--artifact".into(),
            p(&fixture("dpa/dpa_acme.txt")).into(),
            "--rules".into(),
            p(&fixture("gdpr_art28_demo.jsonl")).into(),
            "--stub-script".into(),
            p(&script).into(),
            "--out-dir".into(),
            p(&out_dir).into(),
            "--max-parse-failures".into(),
            limit.into(),
        ]
    };
    let run = |limit| {
        let a = args(limit);
        lexcheck(&a.iter().map(String::as_str).collect::<Vec<_>>())
    };
    assert_eq!(run("3").status.code(), Some(4));
    // the report is still written for auditing
    let report: Value = serde_json::from_str(&read(&out_dir.join("report.json"))).unwrap();
    assert_eq!(report["totals"]["parse_failures"], 10);
    assert_eq!(report["per_rule"], serde_json::json!({}));
    ok(&run("10"));
}

#[test]
fn config_file_sits_between_env_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        format!(
            "granularity = \"sentence\"\nstub_script = {:?}\n",
            p(&fixture("dpa/stub_sentence_blind.jsonl"))
        ),
    )
    .unwrap();
    let artifact = fixture("dpa/dpa_acme.txt");
    let rules = fixture("gdpr_art28_demo.jsonl");
    let run = |extra: &[&str], out: &Path| {
        let mut args = vec![
            "check",
            "--config",
            p(&config),
            "--artifact",
            p(&artifact),
            "--rules",
            p(&rules),
            "--out-dir",
            p(out),
        ];
        args.extend_from_slice(extra);
        let out = Command::new(env!("CARGO_BIN_EXE_lexcheck"))
            .args(&args)
            .env("LEXCHECK_GRANULARITY", "paragraph")
            .env("LEXCHECK_MODEL", "env-model")
            .output()
            .unwrap();
        ok(&out);
    };
    let a = dir.path().join("a");
    run(&[], &a);
    let report: Value = serde_json::from_str(&read(&a.join("report.json"))).unwrap();
    assert_eq!(report["findings"].as_array().unwrap().len(), 19);
    let costs: Value = serde_json::from_str(&read(&a.join("costs.json"))).unwrap();
    assert_eq!(costs["model"], "env-model");

    let b = dir.path().join("b");
    let script = fixture("dpa/stub_paragraph_aware.jsonl");
    run(&["--granularity", "paragraph", "--stub-script", p(&script)], &b);
    let report: Value = serde_json::from_str(&read(&b.join("report.json"))).unwrap();
    assert_eq!(report["findings"].as_array().unwrap().len(), 10);
}

#[test]
fn eval_of_gold_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let gold = fixture("dpa/gold_paragraph.jsonl");
    ok(&lexcheck(&["eval", "--gold", p(&gold), "--pred", p(&gold), "--out-dir", p(dir.path())]));
    let m: Value = serde_json::from_str(&read(&dir.path().join("metrics.json"))).unwrap();
    for key in ["accuracy", "subset_accuracy", "overlap_accuracy", "label_accuracy"] {
        assert_eq!(m[key], 1.0, "{key}");
    }
    for avg in ["micro", "macro_avg"] {
        for key in ["precision", "recall", "f1", "accuracy"] {
            assert_eq!(m[avg][key], 1.0, "{avg}.{key}");
        }
    }
}

fn write_run(dir: &Path, name: &str, labels: [&str; 4]) -> PathBuf {
    let path = dir.join(name);
    let body: String = labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let set: Vec<&str> = if l.is_empty() { vec![] } else { vec![*l] };
            format!("{}\n", serde_json::json!({"unit_ref": format!("u{i}"), "labels": set}))
        })
        .collect();
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn runs_dir_reports_quartiles() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("gold.jsonl");
    std::fs::write(
        &gold,
        "{\"unit_ref\":\"u0\",\"labels\":[\"A\"]}\n{\"unit_ref\":\"u1\",\"labels\":[\"B\"]}\n{\"unit_ref\":\"u2\",\"labels\":[]}\n{\"unit_ref\":\"u3\",\"labels\":[\"A\"]}\n",
    )
    .unwrap();
    let runs = dir.path().join("runs");
    std::fs::create_dir(&runs).unwrap();
    // exact-match accuracies 1.0, 0.5, 0.75, 0.25, 0.75
    write_run(&runs, "r1.jsonl", ["A", "B", "", "A"]);
    write_run(&runs, "r2.jsonl", ["A", "A", "", "B"]);
    write_run(&runs, "r3.jsonl", ["A", "B", "B", "A"]);
    write_run(&runs, "r4.jsonl", ["", "", "A", "A"]);
    write_run(&runs, "r5.jsonl", ["B", "B", "", "A"]);
    let out = dir.path().join("out");
    ok(&lexcheck(&["eval", "--gold", p(&gold), "--runs-dir", p(&runs), "--out-dir", p(&out)]));
    let m: Value = serde_json::from_str(&read(&out.join("metrics.json"))).unwrap();
    assert_eq!(m["runs"].as_array().unwrap().len(), 5);
    let acc = &m["aggregate"]["metrics"]["accuracy"];
    // sorted 0.25 0.5 0.75 0.75 1.0
    assert_eq!(acc["q1"], 0.5);
    assert_eq!(acc["median"], 0.75);
    assert_eq!(acc["q3"], 0.75);
    assert_eq!(acc["min"], 0.25);
    assert_eq!(acc["max"], 1.0);
    assert!((acc["mean"].as_f64().unwrap() - 0.65).abs() < 1e-12);
    // whiskers: fences 0.125 and 1.125 keep every run
    assert_eq!(acc["lower_whisker"], 0.25);
    assert_eq!(acc["upper_whisker"], 1.0);
    let table = read(&out.join("boxplot.tsv"));
    assert!(table.starts_with("metric\tmean\tmedian\tq1\tq3"));
    assert!(table.contains("accuracy\t0.650000\t0.750000\t0.500000\t0.750000\t0.250000\t1.000000"));
}

#[test]
fn repeated_check_runs_feed_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    ok(&check_dpa(
        dir.path(),
        "paragraph",
        "stub_paragraph_aware.jsonl",
        &["--runs", "3", "--cache-dir", p(&cache)],
    ));
    for run in ["run-001", "run-002", "run-003"] {
        assert!(dir.path().join(run).join("report.json").is_file());
        // repeated runs skip cache reads, so every call reaches the backend
        assert!(json_lines(&dir.path().join(run).join("ledger.jsonl"))
            .iter()
            .all(|r| r["cached"] == false));
    }
    let out = dir.path().join("eval");
    ok(&lexcheck(&[
        "eval",
        "--gold",
        p(&fixture("dpa/gold_paragraph.jsonl")),
        "--runs-dir",
        p(dir.path()),
        "--out-dir",
        p(&out),
    ]));
    let m: Value = serde_json::from_str(&read(&out.join("metrics.json"))).unwrap();
    assert_eq!(m["aggregate"]["runs"], 3);
    assert_eq!(m["aggregate"]["metrics"]["accuracy"]["mean"], 1.0);
}

#[test]
fn compare_reports_signed_deltas() {
    let out = lexcheck(&["compare", "--pair", "a=0.30,0.63", "--pair", "b=0.63,0.30"]);
    ok(&out);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["models"][0]["delta"], 0.33);
    assert_eq!(v["models"][0]["direction"], "improved");
    assert_eq!(v["models"][1]["delta"], -0.33);
    assert_eq!(v["mean_delta"], 0.0);
    assert_eq!(lexcheck(&["compare", "--pair", "a=0.3"]).status.code(), Some(2));
}
