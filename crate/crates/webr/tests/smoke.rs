//! Real-backend smoke run over 20 documents.
//!
//! Skipped unless `WEBR_SMOKE=1`. Uses `OPENAI_API_KEY`, and optionally
//! `WEBR_SMOKE_BASE_URL` and `WEBR_SMOKE_MODEL`.

mod support;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use webr::config::BackendKind;
use webr::pipeline::{self, RunOptions};
use webr::RunConfig;
use webr_core::dedup::DedupParams;

const TOPICS: &[(&str, &str)] = &[
    ("sourdough", "A sourdough starter needs flour, water and time. Feed it daily and keep it warm."),
    ("tides", "Tides are driven mostly by the moon's gravity, with the sun adding a smaller effect."),
    ("binary search", "Binary search halves a sorted range at each step, so it runs in logarithmic time."),
    ("compound interest", "Compound interest adds earned interest to the principal, so growth accelerates."),
    ("photosynthesis", "Plants turn light, water and carbon dioxide into sugar and release oxygen."),
];

#[test]
fn real_backend_twenty_documents() {
    if std::env::var("WEBR_SMOKE").as_deref() != Ok("1") {
        eprintln!("skipped: set WEBR_SMOKE=1 to run against a real backend");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("general.jsonl");
    let mut body = String::new();
    for i in 0..20 {
        let (topic, text) = TOPICS[i % TOPICS.len()];
        let line = serde_json::json!({
            "id": format!("smoke-{i:02}"),
            "text": format!("Notes on {topic}, part {}. {text} This page collects a few practical details for readers who are new to the subject.", i / TOPICS.len() + 1),
        });
        writeln!(body, "{line}").unwrap();
    }
    fs::write(&corpus, body).unwrap();

    let base = std::env::var("WEBR_SMOKE_BASE_URL").unwrap_or_else(|_| "https://api.openai.com/v1".into());
    let model = std::env::var("WEBR_SMOKE_MODEL").unwrap_or_else(|_| "gpt-4o-mini".into());
    let text = format!(
        "run_seed = 1\ntarget_pairs = 20\n[sample]\nn = 20\n[corpora.general]\npath = {:?}\n[mix]\ngeneral = 1.0\n\
         [backend]\nkind = \"http\"\nbase_url = {base:?}\nmax_in_flight = 4\n[generation]\nmodel = {model:?}\n\
         [templates]\ndir = {:?}\n[output]\ndir = {:?}\n",
        corpus.display().to_string(),
        support::templates_dir().display().to_string(),
        dir.path().join("out").display().to_string(),
    );
    let cfg = RunConfig::from_toml_str(&text, Path::new("/")).unwrap();
    assert_eq!(cfg.backend.kind, BackendKind::Http);

    let out = pipeline::run(&cfg, &RunOptions::default()).unwrap();
    println!("{} pairs, ledger {:?}", out.pairs, out.ledger.total());
    assert!(out.pairs > 0);
    let report = webr::dataset::validate(out.dataset.as_ref().unwrap(), &DedupParams::default()).unwrap();
    assert!(report.ok(), "{:?}", report.violations);
}
