//! JSONL corpus loading.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use webr_core::corpus::{CorpusError, WebDocument};

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate document id {id:?}")]
    DuplicateId { path: PathBuf, line: usize, id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub max_chars: usize,
    pub min_chars: usize,
    /// Abort on the first malformed line instead of skipping it.
    pub fail_fast: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            max_chars: webr_core::corpus::DEFAULT_MAX_CHARS,
            min_chars: 0,
            fail_fast: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadStats {
    pub loaded: usize,
    pub empty_text: usize,
    pub malformed: usize,
    pub too_short: usize,
    pub truncated: usize,
}

#[derive(Deserialize)]
struct RawRecord {
    id: serde_json::Value,
    text: String,
    #[serde(default)]
    source: Option<String>,
}

fn id_string(v: serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) if !s.is_empty() => Some(s),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Reads `{id, text, source?}` lines from `path` and labels them `domain`.
pub fn load_corpus(
    path: &Path,
    domain: &str,
    opts: &LoadOptions,
) -> Result<(Vec<WebDocument>, LoadStats), LoadError> {
    let io_err = |source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut docs = Vec::new();
    let mut stats = LoadStats::default();
    let mut seen: HashSet<String> = HashSet::new();

    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<RawRecord>(&line)
            .map_err(|e| e.to_string())
            .and_then(|r| match id_string(r.id) {
                Some(id) => Ok((id, r.text, r.source)),
                None => Err("id must be a non-empty string or a number".to_string()),
            });
        let (id, text, source) = match parsed {
            Ok(v) => v,
            Err(message) if opts.fail_fast => {
                return Err(LoadError::Malformed {
                    path: path.to_path_buf(),
                    line: lineno,
                    message,
                })
            }
            Err(message) => {
                log::warn!("{}:{lineno}: skipping malformed record: {message}", path.display());
                stats.malformed += 1;
                continue;
            }
        };
        if !seen.insert(id.clone()) {
            return Err(LoadError::DuplicateId {
                path: path.to_path_buf(),
                line: lineno,
                id,
            });
        }
        match WebDocument::new(id, &text, domain, source, opts.max_chars) {
            Ok(doc) if doc.char_count < opts.min_chars => stats.too_short += 1,
            Ok(doc) => {
                stats.truncated += doc.truncated as usize;
                docs.push(doc);
            }
            Err(CorpusError::EmptyText { id }) => {
                log::warn!("{}:{lineno}: document {id:?} has empty text", path.display());
                stats.empty_text += 1;
            }
            Err(e) => unreachable!("unexpected corpus error {e}"),
        }
    }
    stats.loaded = docs.len();
    Ok((docs, stats))
}

/// Documents and load stats, keyed by domain.
pub type LoadedCorpora = (BTreeMap<String, Vec<WebDocument>>, BTreeMap<String, LoadStats>);

/// Loads several corpora concurrently. Ids must be unique across all of them.
pub fn load_corpora(
    sources: &BTreeMap<String, PathBuf>,
    opts: &LoadOptions,
) -> Result<LoadedCorpora, LoadError> {
    let loaded: Vec<(String, PathBuf, Vec<WebDocument>, LoadStats)> = sources
        .par_iter()
        .map(|(domain, path)| {
            load_corpus(path, domain, opts).map(|(d, s)| (domain.clone(), path.clone(), d, s))
        })
        .collect::<Result<_, _>>()?;

    let mut ids = HashSet::new();
    let mut corpora = BTreeMap::new();
    let mut stats = BTreeMap::new();
    for (domain, path, docs, s) in loaded {
        for (i, d) in docs.iter().enumerate() {
            if !ids.insert(d.id.clone()) {
                return Err(LoadError::DuplicateId {
                    path,
                    line: i + 1,
                    id: d.id.clone(),
                });
            }
        }
        corpora.insert(domain.clone(), docs);
        stats.insert(domain, s);
    }
    Ok((corpora, stats))
}
