//! End-to-end tests of the `cogdoc` binary: run-directory provenance,
//! dry-run planning, and the mock-backend workflows.

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use image::{ImageBuffer, Rgb};
use serde_json::{json, Value};
use tempfile::TempDir;

fn cogdoc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cogdoc"))
}

struct Setup {
    #[allow(dead_code)]
    dir: TempDir,
    config: PathBuf,
    manifest: PathBuf,
    queries: PathBuf,
    script: PathBuf,
    runs_dir: PathBuf,
}

fn build_setup() -> Setup {
    let dir = TempDir::new().unwrap();
    let root = dir.path();

    let mut pages = Vec::new();
    for page_no in 1..=6u32 {
        let file = root.join(format!("p{page_no}.png"));
        let img = ImageBuffer::from_fn(48, 64, |x, y| {
            let v = ((x + y * 3 + page_no * 17) % 251) as u8;
            Rgb([v, v.wrapping_mul(3), v.wrapping_mul(7)])
        });
        img.save(&file).unwrap();
        pages.push(json!({
            "page_no": page_no,
            "image_low": file.display().to_string(),
            "image_high": file.display().to_string(),
            "ocr_text": format!("Figure 1: Totals\n\nPage {page_no} body."),
        }));
    }
    let manifest = root.join("manifest.json");
    fs::write(
        &manifest,
        serde_json::to_string(&json!({
            "docs": [{
                "doc_id": "doc-x",
                "source_uri": "fixture://doc-x",
                "pages": pages,
                "anchors": [{
                    "anchor_id": "x-fig1",
                    "page_no": 2,
                    "kind": "figure",
                    "bbox": [4, 4, 30, 30],
                    "caption": "Figure 1: Totals"
                }]
            }]
        }))
        .unwrap(),
    )
    .unwrap();

    let queries = root.join("queries.jsonl");
    let mut lines = String::new();
    for i in 0..4 {
        lines.push_str(
            &serde_json::to_string(&json!({
                "query_id": format!("q{i}"),
                "doc_id": "doc-x",
                "question": format!("What is on page {}?", i + 1),
                "answer": "totals",
                "gt_pages": [i + 1],
                "anchor_id": "x-fig1",
                "reasoning_type": "extractive",
                "difficulty": null,
                "provenance": "synthesized",
            }))
            .unwrap(),
        );
        lines.push('\n');
    }
    fs::write(&queries, lines).unwrap();

    let script = root.join("script.json");
    fs::write(
        &script,
        serde_json::to_string(&json!({
            "rules": [
                {
                    "role": "policy",
                    "matcher": { "Contains": "skim a document at low resolution" },
                    "response": { "Text": "[2, 3]" }
                },
                {
                    "role": "policy",
                    "matcher": { "Contains": "answer a question from the given document pages" },
                    "response": { "Text": "Reading the page: boxed{totals}" }
                }
            ]
        }))
        .unwrap(),
    )
    .unwrap();

    let runs_dir = root.join("runs");
    let config = root.join("config.json");
    fs::write(
        &config,
        serde_json::to_string(&json!({
            "paths": { "runs_dir": runs_dir.display().to_string() },
            "grpo": { "iterations": 40 },
        }))
        .unwrap(),
    )
    .unwrap();

    Setup {
        dir,
        config,
        manifest,
        queries,
        script,
        runs_dir,
    }
}

fn run_ok(cmd: &mut Command) -> Value {
    let output = cmd.output().unwrap();
    assert!(
        output.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr),
    );
    let stdout = String::from_utf8(output.stdout).unwrap();
    serde_json::from_str(&stdout).unwrap_or(Value::String(stdout))
}

fn run_err(cmd: &mut Command) -> Value {
    let output: Output = cmd.output().unwrap();
    assert!(!output.status.success(), "expected failure");
    let stderr = String::from_utf8(output.stderr).unwrap();
    serde_json::from_str(stderr.trim()).expect("machine-readable error JSON on stderr")
}

#[test]
fn ingest_is_immutable_without_force() {
    let s = build_setup();
    let summary = run_ok(
        cogdoc()
            .arg("--config")
            .arg(&s.config)
            .arg("ingest")
            .arg(&s.manifest),
    );
    assert_eq!(summary["total_documents"], 1);
    let run_id = summary["run_id"].as_str().unwrap().to_string();
    assert!(s.runs_dir.join(&run_id).join("ingest.json").is_file());

    // Same config + seed + inputs => same run_id => refused without --force.
    let err = run_err(
        cogdoc()
            .arg("--config")
            .arg(&s.config)
            .arg("ingest")
            .arg(&s.manifest),
    );
    assert_eq!(err["error"]["kind"], "RunDirOccupied");

    run_ok(
        cogdoc()
            .arg("--config")
            .arg(&s.config)
            .arg("--force")
            .arg("ingest")
            .arg(&s.manifest),
    );
}

#[test]
fn dry_run_plans_without_artifacts() {
    let s = build_setup();
    let plan = run_ok(
        cogdoc()
            .arg("--config")
            .arg(&s.config)
            .arg("--dry-run")
            .arg("run")
            .arg(&s.manifest)
            .arg(&s.queries),
    );
    assert_eq!(plan["command"], "run");
    assert!(plan["run_id"].as_str().unwrap().len() == 16);
    assert!(!s.runs_dir.exists() || fs::read_dir(&s.runs_dir).unwrap().next().is_none());
}

#[test]
fn run_eval_report_roundtrip() {
    let s = build_setup();
    let summary = run_ok(
        cogdoc()
            .arg("--config")
            .arg(&s.config)
            .arg("--mock-script")
            .arg(&s.script)
            .arg("run")
            .arg(&s.manifest)
            .arg(&s.queries),
    );
    assert_eq!(summary["records"], 4);
    assert_eq!(summary["failures"], 0);
    let run_id = summary["run_id"].as_str().unwrap().to_string();
    let run_dir = s.runs_dir.join(&run_id);
    assert!(run_dir.join("records.jsonl").is_file());
    assert!(run_dir.join("trajectories/q0-stage1.json").is_file());

    let report = run_ok(
        cogdoc()
            .arg("--config")
            .arg(&s.config)
            .arg("eval")
            .arg(&run_id),
    );
    assert!(report["aggregates"]["anls"]["mean"].is_number());
    assert!(run_dir.join("eval.json").is_file());

    let rendered = run_ok(
        cogdoc()
            .arg("--config")
            .arg(&s.config)
            .arg("report")
            .arg(&run_id),
    );
    assert!(rendered.as_str().unwrap().contains("## Aggregates"));
    assert!(run_dir.join("report.md").is_file());
}

#[test]
fn eval_missing_run_is_input_missing() {
    let s = build_setup();
    let err = run_err(
        cogdoc()
            .arg("--config")
            .arg(&s.config)
            .arg("eval")
            .arg("no-such-run"),
    );
    assert_eq!(err["error"]["kind"], "InputMissing");
}

#[test]
fn train_toy_writes_log_and_curves() {
    let s = build_setup();
    let summary = run_ok(
        cogdoc()
            .arg("--config")
            .arg(&s.config)
            .arg("train-toy")
            .arg("--docs")
            .arg("5")
            .arg("--pages")
            .arg("6"),
    );
    let run_id = summary["run_id"].as_str().unwrap();
    let run_dir = s.runs_dir.join(run_id);
    let csv = fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    assert!(csv.starts_with("iteration,mean_reward,kl,objective,ppl,self_certainty"));
    assert_eq!(csv.lines().count(), 41);
    let svg = fs::read_to_string(run_dir.join("curves.svg")).unwrap();
    assert!(svg.contains("<svg"));
    assert!(run_dir.join("train_config.json").is_file());
}

#[test]
fn flag_overrides_change_run_identity(){
    let s = build_setup();
    let a = run_ok(
        cogdoc()
            .arg("--config")
            .arg(&s.config)
            .arg("--dry-run")
            .arg("ingest")
            .arg(&s.manifest),
    );
    let b = run_ok(
        cogdoc()
            .arg("--config")
            .arg(&s.config)
            .arg("--dry-run")
            .arg("--k")
            .arg("3")
            .arg("ingest")
            .arg(&s.manifest),
    );
    let c = run_ok(
        cogdoc()
            .arg("--config")
            .arg(&s.config)
            .arg("--dry-run")
            .arg("--seed")
            .arg("99")
            .arg("ingest")
            .arg(&s.manifest),
    );
    assert_ne!(a["run_id"], b["run_id"]);
    assert_ne!(a["run_id"], c["run_id"]);
    assert_eq!(a["run_id"], run_ok(
        cogdoc()
            .arg("--config")
            .arg(&s.config)
            .arg("--dry-run")
            .arg("ingest")
            .arg(&s.manifest),
    )["run_id"]);
}
