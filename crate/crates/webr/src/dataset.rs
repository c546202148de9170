//! Dataset files: the pair JSONL, its manifest, and validation.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use webr_core::cost::CostLedger;
use webr_core::dedup::{dedup, DedupParams, Dedupable};
use webr_core::synthesis::{Ablations, InstructionResponsePair};

use crate::checkpoint::{write_atomic, CheckpointError};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Write(#[from] CheckpointError),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// JSONL bytes, one pair per line, sorted by id.
pub fn encode_pairs(pairs: &[InstructionResponsePair]) -> Vec<u8> {
    let mut sorted: Vec<&InstructionResponsePair> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = Vec::new();
    for p in sorted {
        serde_json::to_writer(&mut out, p).expect("pair serializes");
        out.push(b'\n');
    }
    out
}

pub fn serialize(pairs: &[InstructionResponsePair], path: &Path) -> Result<Vec<u8>, DatasetError> {
    let bytes = encode_pairs(pairs);
    write_atomic(path, &bytes)?;
    Ok(bytes)
}

pub fn read_pairs(path: &Path) -> Result<Vec<InstructionResponsePair>, DatasetError> {
    let file = fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let pair = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(pair);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub branch: BTreeMap<String, usize>,
    pub scope: BTreeMap<String, usize>,
    pub domain: BTreeMap<String, usize>,
}

impl Counts {
    pub fn of(pairs: &[InstructionResponsePair]) -> Self {
        let mut c = Counts::default();
        for p in pairs {
            *c.branch.entry(p.metadata.branch.as_str().into()).or_default() += 1;
            *c.scope.entry(p.metadata.scope.as_str().into()).or_default() += 1;
            *c.domain.entry(p.metadata.extra.domain.clone()).or_default() += 1;
        }
        c
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropStats {
    pub persona_omitted: usize,
    pub instruction_stage: usize,
    pub dedup: usize,
    pub truncated: usize,
    pub response_stage: usize,
}

/// Sidecar written next to the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub run_seed: u64,
    pub target_pairs: usize,
    pub oversample_factor: f64,
    pub oversample_note: String,
    pub sampled: usize,
    pub instructions_kept: usize,
    pub pairs: usize,
    pub shortfall: usize,
    pub ablation: Ablations,
    pub counts: Counts,
    pub drops: DropStats,
    pub ledger: CostLedger,
}

impl Manifest {
    pub fn path_for(dataset: &Path) -> PathBuf {
        dataset.with_file_name(format!(
            "{}.manifest.json",
            dataset.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset")
        ))
    }

    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// 1-based line number; 0 for dataset-level problems.
    pub line: usize,
    pub id: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub lines: usize,
    pub pairs: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

struct Line<'a> {
    line: usize,
    pair: &'a InstructionResponsePair,
}

impl Dedupable for Line<'_> {
    fn dedup_key(&self) -> &str {
        &self.pair.id
    }
    fn dedup_text(&self) -> &str {
        &self.pair.instruction
    }
}

/// Re-checks every pair invariant, ordering and uniqueness of ids, the
/// manifest counts (when a manifest sits next to the file), and that no two
/// kept instructions are near duplicates under `dedup_params`.
pub fn validate(path: &Path, dedup_params: &DedupParams) -> Result<ValidationReport, DatasetError> {
    let file = fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut report = ValidationReport::default();
    let mut parsed: Vec<(usize, InstructionResponsePair)> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        report.lines = lineno;
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        match serde_json::from_str::<InstructionResponsePair>(&line) {
            Ok(p) => parsed.push((lineno, p)),
            Err(e) => report.violations.push(Violation {
                line: lineno,
                id: None,
                message: format!("schema: {e}"),
            }),
        }
    }
    report.pairs = parsed.len();

    let mut prev: Option<&str> = None;
    for (line, p) in &parsed {
        let mut push = |message: String| {
            report.violations.push(Violation {
                line: *line,
                id: Some(p.id.clone()),
                message,
            })
        };
        for v in p.violations() {
            push(v);
        }
        if p.id != p.metadata.doc_id {
            push("id differs from metadata.doc_id".into());
        }
        if let Some(prev) = prev {
            if p.id.as_str() == prev {
                push(format!("duplicate id {:?}", p.id));
            } else if p.id.as_str() < prev {
                push("lines not sorted by id".into());
            }
        }
        prev = Some(&p.id);
    }

    let lines: Vec<Line> = parsed.iter().map(|(line, pair)| Line { line: *line, pair }).collect();
    match dedup(lines, dedup_params) {
        Ok(outcome) => {
            for d in outcome.dropped {
                report.violations.push(Violation {
                    line: d.record.line,
                    id: Some(d.record.pair.id.clone()),
                    message: format!(
                        "near-duplicate of {:?} (estimated Jaccard {:.3} >= {})",
                        d.duplicate_of, d.estimated_jaccard, dedup_params.threshold
                    ),
                });
            }
        }
        Err(e) => report.violations.push(Violation {
            line: 0,
            id: None,
            message: format!("dedup check failed: {e}"),
        }),
    }

    let manifest_path = Manifest::path_for(path);
    if manifest_path.exists() {
        let manifest = Manifest::read(&manifest_path)?;
        let pairs: Vec<InstructionResponsePair> = parsed.into_iter().map(|(_, p)| p).collect();
        if manifest.pairs != pairs.len() {
            report.violations.push(Violation {
                line: 0,
                id: None,
                message: format!("manifest lists {} pairs, file has {}", manifest.pairs, pairs.len()),
            });
        }
        if manifest.counts != Counts::of(&pairs) {
            report.violations.push(Violation {
                line: 0,
                id: None,
                message: "manifest branch/scope/domain counts differ from the dataset".into(),
            });
        }
    }
    Ok(report)
}
