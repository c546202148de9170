mod support;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use webr::checkpoint::Stage;
use webr::dataset::{self, read_pairs, Counts, Manifest};
use webr::gateway::{Backend, CallError, Gateway, RetryPolicy};
use webr::pipeline::{self, DropRecord, PipelineError, RunOptions};
use webr_core::complete::{ApproxTokenCounter, CompletionRequest};
use webr_core::cost::{stage, Completion};
use webr_core::dedup::DedupParams;

fn opts(resume: bool, stop_after: Option<Stage>) -> RunOptions {
    RunOptions { resume, stop_after }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn target_200_is_exact_valid_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let corpora = support::standard_corpora(dir.path(), 400, 100, 100);
    let a = support::config(&corpora, &dir.path().join("a"), "target_pairs = 200", "");
    let b = support::config(&corpora, &dir.path().join("b"), "target_pairs = 200", "");

    let ra = pipeline::run(&a, &opts(false, None)).unwrap();
    let rb = pipeline::run(&b, &opts(false, None)).unwrap();
    assert_eq!(ra.pairs, 200);
    assert_eq!(ra.shortfall, 0);
    let da = fs::read(ra.dataset.as_ref().unwrap()).unwrap();
    let db = fs::read(rb.dataset.as_ref().unwrap()).unwrap();
    assert_eq!(da, db);

    let report = dataset::validate(ra.dataset.as_ref().unwrap(), &DedupParams::default()).unwrap();
    assert!(report.ok(), "{:?}", report.violations);
    assert_eq!(report.pairs, 200);
    assert_eq!(ra.gateway_stats.retries, 0);
    assert!(ra.gateway_stats.peak_in_flight <= 8);
}

#[test]
fn manifest_and_drop_log_conserve_counts() {
    let dir = tempfile::tempdir().unwrap();
    let corpora = support::standard_corpora(dir.path(), 400, 100, 100);
    let cfg = support::config(&corpora, &dir.path().join("out"), "target_pairs = 200", "[mock]\nempty_rate = 0.3");
    let out = pipeline::run(&cfg, &opts(false, None)).unwrap();
    let m = out.manifest.clone().unwrap();
    let pairs = read_pairs(out.dataset.as_ref().unwrap()).unwrap();

    assert_eq!(m, Manifest::read(&Manifest::path_for(out.dataset.as_ref().unwrap())).unwrap());
    assert_eq!(m.counts, Counts::of(&pairs));
    assert_eq!(m.pairs, pairs.len());
    assert_eq!(m.sampled, 240);
    // pairs out = instructions kept after truncation - response drops
    assert_eq!(m.pairs, m.instructions_kept - m.drops.response_stage);
    assert_eq!(
        m.sampled,
        m.drops.instruction_stage + m.drops.dedup + m.drops.truncated + m.instructions_kept
    );
    assert!(m.drops.response_stage > 0, "empty completions should cost some pairs");

    let drops: Vec<DropRecord> = read_jsonl(&out.output_dir.join(pipeline::DROPS_FILE));
    let count = |s: &str| drops.iter().filter(|d| d.stage == s).count();
    assert_eq!(count("persona"), m.drops.persona_omitted);
    assert_eq!(count("dedup"), m.drops.dedup);
    assert_eq!(count("truncate"), m.drops.truncated);
    assert_eq!(
        drops.len(),
        m.drops.persona_omitted + m.drops.instruction_stage + m.drops.dedup + m.drops.truncated + m.drops.response_stage
    );
    assert!(drops.iter().all(|d| !d.reason.is_empty()));
    if m.shortfall > 0 {
        assert_eq!(m.shortfall, 200 - m.pairs);
    }
}

#[test]
fn near_duplicates_are_dropped_and_reported() {
    let dir = tempfile::tempdir().unwrap();
    let corpora = support::standard_corpora(dir.path(), 500, 100, 100);
    let cfg = support::config(&corpora, &dir.path().join("out"), "target_pairs = 500\n[sample]\nn = 600", "");
    let out = pipeline::run(&cfg, &opts(false, None)).unwrap();
    let report: Vec<pipeline::DedupDrop> = read_jsonl(&out.output_dir.join(pipeline::DEDUP_REPORT_FILE));
    assert!(!report.is_empty());
    for d in &report {
        assert!(d.kept_id < d.dropped_id);
        assert!(d.estimated_jaccard >= 0.7);
    }
    assert_eq!(out.manifest.unwrap().drops.dedup, report.len());
}

#[test]
fn resume_after_dedup_skips_upstream_calls() {
    let dir = tempfile::tempdir().unwrap();
    let corpora = support::standard_corpora(dir.path(), 400, 100, 100);
    let full = support::config(&corpora, &dir.path().join("full"), "target_pairs = 150", "");
    let split = support::config(&corpora, &dir.path().join("split"), "target_pairs = 150", "");

    let reference = pipeline::run(&full, &opts(false, None)).unwrap();

    let first = pipeline::run(&split, &opts(false, Some(Stage::Deduped))).unwrap();
    assert_eq!(first.stopped_after, Some(Stage::Deduped));
    assert!(first.dataset.is_none());

    let resumed = pipeline::run(&split, &opts(true, None)).unwrap();
    assert_eq!(resumed.resumed_from, Some(Stage::Deduped));
    for s in [stage::PERSONA, stage::WAI_INSTRUCTION, stage::WAR_INSTRUCTION] {
        assert_eq!(resumed.session_ledger.calls(s), 0, "{s}");
    }
    assert!(resumed.session_ledger.calls(stage::WAI_RESPONSE) > 0);
    assert_eq!(resumed.ledger, reference.ledger);
    assert_eq!(
        fs::read(resumed.dataset.unwrap()).unwrap(),
        fs::read(reference.dataset.unwrap()).unwrap()
    );
}

#[test]
fn resume_from_every_stage_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let corpora = support::standard_corpora(dir.path(), 200, 50, 50);
    let top = "target_pairs = 60";
    let reference = pipeline::run(&support::config(&corpora, &dir.path().join("ref"), top, ""), &opts(false, None)).unwrap();
    let expected = fs::read(reference.dataset.unwrap()).unwrap();

    for s in [Stage::Sampled, Stage::Personas, Stage::Instructions, Stage::Deduped, Stage::Responses] {
        let cfg = support::config(&corpora, &dir.path().join(s.as_str()), top, "");
        pipeline::run(&cfg, &opts(false, Some(s))).unwrap();
        let resumed = pipeline::run(&cfg, &opts(true, None)).unwrap();
        assert_eq!(resumed.resumed_from, Some(s));
        assert_eq!(fs::read(resumed.dataset.unwrap()).unwrap(), expected, "interrupted after {s}");
        assert_eq!(resumed.ledger, reference.ledger, "interrupted after {s}");
    }
}

#[test]
fn changed_config_invalidates_only_downstream_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let corpora = support::standard_corpora(dir.path(), 200, 50, 50);
    let out = dir.path().join("out");
    let base = support::config(&corpora, &out, "target_pairs = 60", "");
    pipeline::run(&base, &opts(false, None)).unwrap();

    let mut changed = base.clone();
    changed.ablation.no_refine = true;
    let r = pipeline::run(&changed, &opts(true, None)).unwrap();
    assert_eq!(r.resumed_from, Some(Stage::Deduped));
    assert_eq!(r.session_ledger.calls(stage::PERSONA), 0);
    assert_eq!(r.ledger.calls(stage::WAR_REFINE), 0);

    let mut reseeded = base.clone();
    reseeded.run_seed = 7;
    let r = pipeline::run(&reseeded, &opts(true, None)).unwrap();
    assert_eq!(r.resumed_from, None);

    // a full match restores everything, even the final stage
    let r = pipeline::run(&reseeded, &opts(true, None)).unwrap();
    assert_eq!(r.resumed_from, Some(Stage::Responses));
    assert!(r.session_ledger.rows.is_empty());
}

#[test]
fn edited_corpus_file_invalidates_sampling() {
    let dir = tempfile::tempdir().unwrap();
    let corpora = support::standard_corpora(dir.path(), 200, 50, 50);
    let cfg = support::config(&corpora, &dir.path().join("out"), "target_pairs = 30", "");
    pipeline::run(&cfg, &opts(false, Some(Stage::Sampled))).unwrap();
    let mut text = fs::read_to_string(&corpora["math"]).unwrap();
    text.push_str("{\"id\":\"extra\",\"text\":\"one more document\"}\n");
    fs::write(&corpora["math"], text).unwrap();
    let r = pipeline::run(&cfg, &opts(true, None)).unwrap();
    assert_eq!(r.resumed_from, None);
}

#[test]
fn shortfall_completes_with_actual_count() {
    let dir = tempfile::tempdir().unwrap();
    let corpora = support::standard_corpora(dir.path(), 200, 50, 50);
    let cfg = support::config(&corpora, &dir.path().join("out"), "target_pairs = 100\n[sample]\nn = 80", "");
    let out = pipeline::run(&cfg, &opts(false, None)).unwrap();
    assert!(out.pairs <= 80);
    assert_eq!(out.shortfall, 100 - out.pairs);
    assert_eq!(out.manifest.unwrap().shortfall, out.shortfall);
}

struct Broken;

impl Backend for Broken {
    fn id(&self) -> &str {
        "broken"
    }
    fn call(&self, _: &CompletionRequest) -> Result<Completion, CallError> {
        Err(CallError::Permanent("401 invalid api key".into()))
    }
}

#[test]
fn fatal_backend_error_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let corpora = support::standard_corpora(dir.path(), 200, 50, 50);
    let cfg = support::config(&corpora, &dir.path().join("out"), "target_pairs = 20", "");
    let gw = Gateway::new(Box::new(Broken), Arc::new(ApproxTokenCounter), 4, 128_000, RetryPolicy::default());
    let err = pipeline::run_with_gateway(&cfg, &gw, &opts(false, None)).unwrap_err();
    match &err {
        PipelineError::Stage { stage, resume_hint, .. } => {
            assert_eq!(*stage, Stage::Personas);
            assert!(resume_hint.contains("sampled"), "{resume_hint}");
        }
        other => panic!("unexpected {other}"),
    }
    assert!(err.to_string().contains("401"));
}

#[test]
fn reports_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let corpora = support::standard_corpora(dir.path(), 200, 50, 50);
    let cfg = support::config(
        &corpora,
        &dir.path().join("out"),
        "target_pairs = 40",
        "[analysis]\ndiversity = true\njudge = true",
    );
    let out = pipeline::run(&cfg, &opts(false, None)).unwrap();
    for f in [
        pipeline::TOKENS_FILE,
        pipeline::BUDGET_FILE,
        pipeline::BUDGET_TABLE_FILE,
        pipeline::DIVERSITY_FILE,
        pipeline::JUDGE_FILE,
    ] {
        assert!(out.output_dir.join(f).exists(), "{f}");
    }
    let judge: webr_core::analysis::JudgeReport =
        serde_json::from_str(&fs::read_to_string(out.output_dir.join(pipeline::JUDGE_FILE)).unwrap()).unwrap();
    assert_eq!(judge.histogram_total() as usize, judge.verdicts.len());
    assert_eq!(judge.verdicts.len() + judge.excluded.len(), out.pairs);
    assert_eq!(out.ledger.calls(stage::JUDGE) as usize, out.pairs);
    let table = fs::read_to_string(out.output_dir.join(pipeline::BUDGET_TABLE_FILE)).unwrap();
    assert!(table.contains("Total"), "{table}");
}

fn webr() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_webr"));
    c.env("RUST_LOG", "warn");
    c
}

#[test]
fn cli_run_validate_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let corpora = support::standard_corpora(dir.path(), 200, 50, 50);
    let out_dir = dir.path().join("out");
    let cfg_path = dir.path().join("webr.toml");
    fs::write(&cfg_path, support::config_text(&corpora, &out_dir, "target_pairs = 1000")).unwrap();

    let status = webr()
        .args(["run", "--config"])
        .arg(&cfg_path)
        .args(["--limit", "30"])
        .status()
        .unwrap();
    assert!(status.success());
    let dataset = out_dir.join(pipeline::DATASET_FILE);
    assert_eq!(read_pairs(&dataset).unwrap().len(), 30);

    let status = webr().arg("validate").arg(&dataset).status().unwrap();
    assert_eq!(status.code(), Some(0));

    let text = fs::read_to_string(&dataset).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let mut broken: serde_json::Value = serde_json::from_str(lines[3]).unwrap();
    broken["response"] = "".into();
    let broken = broken.to_string();
    lines[3] = &broken;
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, lines.join("\n") + "\n").unwrap();
    let out = webr().arg("validate").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("line 4"));

    let out = webr().args(["run", "--config", "/nonexistent.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn cli_dedup_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    let base = "the quick brown fox jumps over the lazy dog while the cat sleeps on the warm mat all afternoon long";
    let lines = [
        serde_json::json!({"id": "a", "instruction": base}),
        serde_json::json!({"id": "b", "instruction": format!("{base} today")}),
        serde_json::json!({"id": "c", "instruction": "something entirely different about rust compilers and borrow checking"}),
    ];
    fs::write(&input, lines.iter().map(|l| l.to_string() + "\n").collect::<String>()).unwrap();
    let output = dir.path().join("out.jsonl");
    let report = dir.path().join("report.jsonl");
    let status = webr()
        .arg("dedup")
        .arg("--input")
        .arg(&input)
        .arg("--output")
        .arg(&output)
        .arg("--report")
        .arg(&report)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(fs::read_to_string(&output).unwrap().lines().count(), 2);
    let drops: Vec<pipeline::DedupDrop> = read_jsonl(&report);
    assert_eq!(drops.len(), 1);
    assert_eq!((drops[0].dropped_id.as_str(), drops[0].kept_id.as_str()), ("b", "a"));
}

#[test]
fn cli_budget_reference_plan() {
    let out = webr().args(["budget", "--json"]).output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["lines"].as_array().unwrap().len(), 6);
    let out = webr().arg("budget").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    let total = text.lines().last().unwrap();
    assert!(total.starts_with("Total") && total.ends_with("38.56"), "{text}");
}
