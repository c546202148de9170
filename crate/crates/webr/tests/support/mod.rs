//! Synthetic corpora and configs for integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use webr::RunConfig;
use webr_core::seed::SplitMix64;

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ne", "ru", "sa", "to", "vi", "ze", "po", "qu", "ly", "da", "fe", "gi", "ho", "ju", "ba",
    "co", "wu", "xe", "yo", "tra", "sen", "mor", "pil", "dex", "nor", "vas", "kel",
];

fn word(rng: &mut SplitMix64) -> String {
    let n = 2 + (rng.next_u64() % 3) as usize;
    (0..n)
        .map(|_| SYLLABLES[(rng.next_u64() % SYLLABLES.len() as u64) as usize])
        .collect()
}

/// A pseudo-document of `words` words.
pub fn document(rng: &mut SplitMix64, words: usize) -> String {
    let mut s = String::new();
    for i in 0..words {
        if i > 0 {
            s.push(if i % 17 == 0 { '\n' } else { ' ' });
        }
        s.push_str(&word(rng));
    }
    s
}

/// Replaces one word, leaving a near duplicate.
pub fn perturb(text: &str, rng: &mut SplitMix64) -> String {
    let mut words: Vec<&str> = text.split(' ').collect();
    let i = (rng.next_u64() % words.len() as u64) as usize;
    let replacement = format!("zz{}", rng.next_u64() % 1000);
    words[i] = &replacement;
    words.join(" ")
}

pub struct CorpusSpec {
    pub domain: &'static str,
    pub docs: usize,
    /// Every `dup_every`-th document is a near copy of the one before it.
    pub dup_every: Option<usize>,
}

/// Writes one JSONL file per domain and returns their paths.
pub fn write_corpora(dir: &Path, specs: &[CorpusSpec], seed: u64) -> BTreeMap<String, PathBuf> {
    let mut rng = SplitMix64::new(seed);
    let mut out = BTreeMap::new();
    for spec in specs {
        let mut body = String::new();
        let mut prev = String::new();
        for i in 0..spec.docs {
            let text = match spec.dup_every {
                Some(k) if i > 0 && i % k == 0 => perturb(&prev, &mut rng),
                _ => {
                    let words = 300 + (rng.next_u64() % 200) as usize;
                    document(&mut rng, words)
                }
            };
            let line = serde_json::json!({
                "id": format!("{}-{:05}", spec.domain, i),
                "text": text,
                "source": "synthetic",
            });
            writeln!(body, "{line}").unwrap();
            prev = text;
        }
        let path = dir.join(format!("{}.jsonl", spec.domain));
        fs::write(&path, body).unwrap();
        out.insert(spec.domain.to_string(), path);
    }
    out
}

pub fn templates_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../templates")
}

/// The standard three-domain layout at 70/15/15 with near duplicates in
/// every corpus.
pub fn standard_corpora(dir: &Path, general: usize, math: usize, code: usize) -> BTreeMap<String, PathBuf> {
    write_corpora(
        dir,
        &[
            CorpusSpec {
                domain: "general",
                docs: general,
                dup_every: Some(20),
            },
            CorpusSpec {
                domain: "math",
                docs: math,
                dup_every: Some(20),
            },
            CorpusSpec {
                domain: "code",
                docs: code,
                dup_every: Some(20),
            },
        ],
        7,
    )
}

/// Config text for a mock run over `corpora`, with `extra` appended.
pub fn config_text(corpora: &BTreeMap<String, PathBuf>, out_dir: &Path, extra: &str) -> String {
    let mut s = String::new();
    writeln!(s, "run_seed = 42").unwrap();
    writeln!(s, "{}", extra.trim()).unwrap();
    for (d, p) in corpora {
        writeln!(s, "[corpora.{d}]\npath = {:?}", p.display().to_string()).unwrap();
    }
    writeln!(s, "[mix]\ngeneral = 0.7\nmath = 0.15\ncode = 0.15").unwrap();
    writeln!(s, "[backend]\nkind = \"mock\"\nmax_in_flight = 8\nbase_delay_ms = 1").unwrap();
    writeln!(s, "[templates]\ndir = {:?}", templates_dir().display().to_string()).unwrap();
    writeln!(s, "[output]\ndir = {:?}", out_dir.display().to_string()).unwrap();
    s
}

/// `top` holds top-level keys; `sections` is appended after the generated
/// sections and may add more tables.
pub fn config(corpora: &BTreeMap<String, PathBuf>, out_dir: &Path, top: &str, sections: &str) -> RunConfig {
    let text = format!("{}\n{}", config_text(corpora, out_dir, top), sections);
    RunConfig::from_toml_str(&text, Path::new("/")).unwrap()
}
