//! Dataset reporting: embedding diversity, judge verdicts, token lengths.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::complete::{Complete, CompletionRequest, GatewayError, TokenCounter};
use crate::cost::{stage, GenerationParams};
use crate::seed;
use crate::template::Template;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("need at least two embeddings, got {0}")]
    TooFew(usize),
    #[error("sample size {n} exceeds population {available}")]
    SampleTooLarge { n: usize, available: usize },
    #[error("embedding {0:?} is a zero vector")]
    ZeroVector(String),
    #[error("embedding {id:?} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("histogram bin width must be positive")]
    BinWidth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub source_id: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub n_sampled: usize,
    pub mean_pairwise_cosine: f64,
    pub diversity: f64,
}

/// Seeded uniform sample of `n` indices out of `len`, in ascending order.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>, AnalysisError> {
    if n > len {
        return Err(AnalysisError::SampleTooLarge { n, available: len });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "diversity"));
    let mut idx = rand::seq::index::sample(&mut rng, len, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// `1 - mean_{i<j} cos(e_i, e_j)` over all given embeddings.
///
/// With unit vectors `u_i` and their mean `m`,
/// `sum_{i<j} |u_i - u_j|^2 = N * sum_i |u_i - m|^2` and
/// `|u_i - u_j|^2 = 2 - 2 cos`, so the diversity equals
/// `sum_i |u_i - m|^2 / (N - 1)`. This is `O(N d)` and, unlike expanding
/// `|sum u_i|^2 - N`, has no cancellation: identical inputs give exactly 0.
pub fn diversity(embeddings: &[EmbeddingVector]) -> Result<DiversityReport, AnalysisError> {
    let n = embeddings.len();
    if n < 2 {
        return Err(AnalysisError::TooFew(n));
    }
    let dim = embeddings[0].values.len();
    let mut units: Vec<Vec<f64>> = Vec::with_capacity(n);
    for e in embeddings {
        if e.values.len() != dim {
            return Err(AnalysisError::DimensionMismatch {
                id: e.source_id.clone(),
                expected: dim,
                got: e.values.len(),
            });
        }
        let norm = libm::sqrt(e.values.iter().map(|x| x * x).sum::<f64>());
        if norm == 0.0 || !norm.is_finite() {
            return Err(AnalysisError::ZeroVector(e.source_id.clone()));
        }
        units.push(e.values.iter().map(|x| x / norm).collect());
    }

    // Running mean stays bit-exact when all inputs are equal.
    let mut mean = alloc::vec![0.0f64; dim];
    for (k, u) in units.iter().enumerate() {
        let inv = 1.0 / (k + 1) as f64;
        for (m, x) in mean.iter_mut().zip(u) {
            *m += (x - *m) * inv;
        }
    }
    let spread: f64 = units
        .iter()
        .map(|u| u.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
        .sum();
    let diversity = spread / (n - 1) as f64;
    Ok(DiversityReport {
        n_sampled: n,
        mean_pairwise_cosine: 1.0 - diversity,
        diversity,
    })
}

/// Picks `n` embeddings with [`sample_indices`] and measures their diversity.
pub fn sampled_diversity(
    embeddings: &[EmbeddingVector],
    n: usize,
    seed: u64,
) -> Result<DiversityReport, AnalysisError> {
    let idx = sample_indices(embeddings.len(), n, seed)?;
    let picked: Vec<EmbeddingVector> = idx.into_iter().map(|i| embeddings[i].clone()).collect();
    diversity(&picked)
}

/// Signed feature hashing of word unigrams. An offline stand-in for a real
/// sentence encoder.
#[derive(Debug, Clone, Copy)]
pub struct HashingEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl HashingEmbedder {
    pub fn embed(&self, id: &str, text: &str) -> EmbeddingVector {
        let mut values = alloc::vec![0.0; self.dim.max(1)];
        for w in text.split_whitespace() {
            let w = w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
            if w.is_empty() {
                continue;
            }
            let h = seed::hash_str(&w, self.seed);
            let slot = (h % values.len() as u64) as usize;
            values[slot] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
        if values.iter().all(|v| *v == 0.0) {
            values[0] = 1.0;
        }
        EmbeddingVector {
            source_id: id.to_string(),
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub instruction_id: String,
    pub quality: u8,
    pub difficulty: u8,
    pub raw_judge_text: String,
}

fn level_after(text: &str, label: &str) -> Option<u8> {
    let lower = text.to_ascii_lowercase();
    let pos = lower.find(label)?;
    let rest = lower[pos + label.len()..].trim_start();
    let rest = rest.strip_prefix(':')?.trim_start();
    let mut digits = rest.chars().take_while(|c| c.is_ascii_digit());
    let d = digits.next()?.to_digit(10)? as u8;
    if digits.next().is_some() || !(1..=5).contains(&d) {
        return None;
    }
    Some(d)
}

/// Reads `quality: <1-5>, difficulty: <1-5>`. Anything else is `None`.
pub fn parse_verdict(text: &str) -> Option<(u8, u8)> {
    Some((level_after(text, "quality")?, level_after(text, "difficulty")?))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeReport {
    pub verdicts: Vec<JudgeVerdict>,
    pub excluded: Vec<String>,
    /// `histogram[q - 1][d - 1]`.
    pub histogram: [[u64; 5]; 5],
}

impl JudgeReport {
    pub fn push(&mut self, id: &str, raw: String) {
        match parse_verdict(&raw) {
            Some((q, d)) => {
                self.histogram[q as usize - 1][d as usize - 1] += 1;
                self.verdicts.push(JudgeVerdict {
                    instruction_id: id.to_string(),
                    quality: q,
                    difficulty: d,
                    raw_judge_text: raw,
                });
            }
            None => self.excluded.push(id.to_string()),
        }
    }

    pub fn histogram_total(&self) -> u64 {
        self.histogram.iter().flatten().sum()
    }

    pub fn quality_counts(&self) -> [u64; 5] {
        let mut out = [0; 5];
        for (q, row) in self.histogram.iter().enumerate() {
            out[q] = row.iter().sum();
        }
        out
    }

    pub fn difficulty_counts(&self) -> [u64; 5] {
        let mut out = [0; 5];
        for row in &self.histogram {
            for (d, c) in row.iter().enumerate() {
                out[d] += c;
            }
        }
        out
    }
}

/// Asks the judge about one instruction and returns its raw answer.
/// Empty answers come back as empty strings so they are excluded, not fatal.
pub fn judge_one<C: Complete + ?Sized>(
    backend: &C,
    template: &Template,
    params: &GenerationParams,
    id: &str,
    instruction: &str,
    seed: u64,
) -> Result<String, GatewayError> {
    let req = CompletionRequest {
        prompt: template.render(&[("instruction", Some(instruction))]),
        params: params.clone(),
        stage: stage::JUDGE.to_string(),
        seed: seed::derive(seed::task_seed(seed, id), stage::JUDGE),
    };
    match backend.complete(&req) {
        Ok(c) => Ok(c.text),
        Err(e) if e.is_task_local() => Ok(String::new()),
        Err(e) => Err(e),
    }
}

pub fn judge<C: Complete + ?Sized>(
    backend: &C,
    template: &Template,
    params: &GenerationParams,
    items: &[(String, String)],
    seed: u64,
) -> Result<JudgeReport, GatewayError> {
    let mut report = JudgeReport::default();
    for (id, instruction) in items {
        let raw = judge_one(backend, template, params, id, instruction, seed)?;
        report.push(id, raw);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: u64,
    /// `(bin_start, count)` for non-empty bins, ascending.
    pub bins: Vec<(u64, u64)>,
}

impl Histogram {
    fn build(values: &[u64], bin_width: u64) -> Self {
        let mut map = alloc::collections::BTreeMap::new();
        for v in values {
            *map.entry(v / bin_width * bin_width).or_insert(0u64) += 1;
        }
        Self {
            bin_width,
            bins: map.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub pairs: usize,
    pub avg_instruction_tokens: f64,
    pub avg_response_tokens: f64,
    pub instruction_histogram: Histogram,
    pub response_histogram: Histogram,
}

fn mean_2dp(values: &[u64]) -> f64 {
    let sum: u128 = values.iter().map(|v| *v as u128).sum();
    libm::round(sum as f64 / values.len() as f64 * 100.0) / 100.0
}

/// Token-length statistics over `(instruction, response)` texts.
pub fn token_stats<'a>(
    pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    counter: &dyn TokenCounter,
    bin_width: u64,
) -> Result<TokenStats, AnalysisError> {
    if bin_width == 0 {
        return Err(AnalysisError::BinWidth);
    }
    let (ins, outs): (Vec<u64>, Vec<u64>) = pairs
        .into_iter()
        .map(|(i, r)| (counter.count(i), counter.count(r)))
        .unzip();
    if ins.is_empty() {
        return Err(AnalysisError::EmptyDataset);
    }
    Ok(TokenStats {
        pairs: ins.len(),
        avg_instruction_tokens: mean_2dp(&ins),
        avg_response_tokens: mean_2dp(&outs),
        instruction_histogram: Histogram::build(&ins, bin_width),
        response_histogram: Histogram::build(&outs, bin_width),
    })
}
