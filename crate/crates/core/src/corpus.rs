//! Raw web documents and domain-mix sampling.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::seed;

/// Default cap on document length, in Unicode scalar values.
pub const DEFAULT_MAX_CHARS: usize = 8000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CorpusError {
    #[error("document {id:?} has empty text")]
    EmptyText { id: String },
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("mix weight for {domain:?} must be in (0, 1], got {weight}")]
    BadWeight { domain: String, weight: f64 },
    #[error("mix weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("domain {0:?} listed twice in mix")]
    DuplicateDomain(String),
    #[error("mix is empty")]
    EmptyMix,
    #[error("mix domain {0:?} has no corpus")]
    UnknownDomain(String),
    #[error("corpus {domain:?} has {available} documents, {needed} requested")]
    CorpusTooSmall {
        domain: String,
        available: usize,
        needed: usize,
    },
    #[error("sample size must be positive")]
    ZeroSample,
}

/// One raw web text with its domain label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WebDocument {
    pub id: String,
    pub text: String,
    pub domain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub char_count: usize,
    #[serde(default)]
    pub truncated: bool,
}

impl WebDocument {
    /// Builds a document, truncating overlong text at the last whitespace
    /// before `max_chars`.
    pub fn new(
        id: impl Into<String>,
        text: &str,
        domain: impl Into<String>,
        source: Option<String>,
        max_chars: usize,
    ) -> Result<Self, CorpusError> {
        let id = id.into();
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(CorpusError::EmptyText { id });
        }
        let (text, truncated) = truncate_at_whitespace(trimmed, max_chars);
        Ok(Self {
            id,
            char_count: text.chars().count(),
            text: String::from(text),
            domain: domain.into(),
            source,
            truncated,
        })
    }
}

/// Cuts `text` to at most `max_chars` scalar values, preferring the last
/// whitespace boundary inside the limit. Falls back to a hard cut when the
/// prefix has no whitespace.
pub fn truncate_at_whitespace(text: &str, max_chars: usize) -> (&str, bool) {
    let Some((limit, _)) = text.char_indices().nth(max_chars) else {
        return (text, false);
    };
    let prefix = &text[..limit];
    match prefix.rfind(char::is_whitespace) {
        Some(ws) if !prefix[..ws].trim_end().is_empty() => (prefix[..ws].trim_end(), true),
        _ => (prefix, true),
    }
}

/// Domain proportions for sampling. Entries are kept sorted by label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMix {
    entries: Vec<(String, f64)>,
}

impl DomainMix {
    pub fn new(entries: impl IntoIterator<Item = (String, f64)>) -> Result<Self, CorpusError> {
        let mut entries: Vec<(String, f64)> = entries.into_iter().collect();
        if entries.is_empty() {
            return Err(CorpusError::EmptyMix);
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(CorpusError::DuplicateDomain(pair[0].0.clone()));
            }
        }
        for (domain, weight) in &entries {
            if !(*weight > 0.0 && *weight <= 1.0) {
                return Err(CorpusError::BadWeight {
                    domain: domain.clone(),
                    weight: *weight,
                });
            }
        }
        let sum: f64 = entries.iter().map(|e| e.1).sum();
        if libm::fabs(sum - 1.0) > 1e-9 {
            return Err(CorpusError::WeightSum(sum));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    /// Per-domain counts summing to exactly `n` (largest-remainder rounding;
    /// equal remainders go to the lexicographically smaller label).
    pub fn allot(&self, n: usize) -> Vec<(String, usize)> {
        let mut floors: Vec<usize> = Vec::with_capacity(self.entries.len());
        let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(self.entries.len());
        for (i, (_, w)) in self.entries.iter().enumerate() {
            let exact = n as f64 * w;
            // Snap values that are integral up to float noise.
            let rounded = libm::round(exact);
            let exact = if libm::fabs(exact - rounded) < 1e-6 { rounded } else { exact };
            let floor = libm::floor(exact);
            floors.push(floor as usize);
            remainders.push((exact - floor, i));
        }
        let assigned: usize = floors.iter().sum();
        let mut leftover = n.saturating_sub(assigned);
        remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in remainders.iter().cycle() {
            if leftover == 0 {
                break;
            }
            floors[i] += 1;
            leftover -= 1;
        }
        self.entries
            .iter()
            .zip(floors)
            .map(|((d, _), c)| (d.clone(), c))
            .collect()
    }
}

/// Draws exactly `n` documents according to `mix`.
///
/// Within a domain the draw is uniform without replacement; the combined
/// list is shuffled. Everything is a function of `seed`.
pub fn sample_by_mix(
    corpora: &BTreeMap<String, Vec<WebDocument>>,
    mix: &DomainMix,
    n: usize,
    seed: u64,
) -> Result<Vec<WebDocument>, CorpusError> {
    if n == 0 {
        return Err(CorpusError::ZeroSample);
    }
    let allotment = mix.allot(n);
    for (domain, count) in &allotment {
        let docs = corpora
            .get(domain)
            .ok_or_else(|| CorpusError::UnknownDomain(domain.clone()))?;
        if docs.len() < *count {
            return Err(CorpusError::CorpusTooSmall {
                domain: domain.clone(),
                available: docs.len(),
                needed: *count,
            });
        }
    }

    let mut out = Vec::with_capacity(n);
    let mut seen = BTreeSet::new();
    for (domain, count) in &allotment {
        let docs = &corpora[domain];
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, domain));
        for idx in rand::seq::index::sample(&mut rng, docs.len(), *count) {
            let doc = &docs[idx];
            if !seen.insert(doc.id.as_str()) {
                return Err(CorpusError::DuplicateId(doc.id.clone()));
            }
            out.push(doc.clone());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "shuffle"));
    out.shuffle(&mut rng);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::string::ToString;
    use alloc::vec;

    fn docs(domain: &str, n: usize) -> Vec<WebDocument> {
        (0..n)
            .map(|i| {
                WebDocument::new(format!("{domain}-{i}"), "some text", domain, None, 100).unwrap()
            })
            .collect()
    }

    fn mix(entries: &[(&str, f64)]) -> DomainMix {
        DomainMix::new(entries.iter().map(|(d, w)| (d.to_string(), *w))).unwrap()
    }

    #[test]
    fn published_mix_is_exact() {
        let m = mix(&[("general", 0.70), ("math", 0.15), ("code", 0.15)]);
        let counts: BTreeMap<_, _> = m.allot(100_000).into_iter().collect();
        assert_eq!(counts["general"], 70_000);
        assert_eq!(counts["math"], 15_000);
        assert_eq!(counts["code"], 15_000);
    }

    #[test]
    fn thirds_use_largest_remainder() {
        let m = mix(&[("a", 1.0 / 3.0), ("b", 1.0 / 3.0), ("c", 1.0 / 3.0)]);
        let counts: Vec<usize> = m.allot(100).into_iter().map(|c| c.1).collect();
        assert_eq!(counts, vec![34, 33, 33]);
    }

    #[test]
    fn mix_validation() {
        assert!(matches!(
            DomainMix::new([("a".into(), 0.5), ("a".into(), 0.5)]),
            Err(CorpusError::DuplicateDomain(_))
        ));
        assert!(matches!(
            DomainMix::new([("a".into(), 0.5), ("b".into(), 0.4)]),
            Err(CorpusError::WeightSum(_))
        ));
        assert!(matches!(
            DomainMix::new([("a".into(), 0.0), ("b".into(), 1.0)]),
            Err(CorpusError::BadWeight { .. })
        ));
    }

    #[test]
    fn single_domain_mix() {
        let mut corpora = BTreeMap::new();
        corpora.insert("math".to_string(), docs("math", 20));
        corpora.insert("code".to_string(), docs("code", 20));
        let out = sample_by_mix(&corpora, &mix(&[("math", 1.0)]), 10, 3).unwrap();
        assert_eq!(out.len(), 10);
        assert!(out.iter().all(|d| d.domain == "math"));
    }

    #[test]
    fn sampling_errors() {
        let mut corpora = BTreeMap::new();
        corpora.insert("a".to_string(), docs("a", 3));
        let err = sample_by_mix(&corpora, &mix(&[("a", 1.0)]), 5, 0).unwrap_err();
        assert!(matches!(err, CorpusError::CorpusTooSmall { needed: 5, .. }));
        let err = sample_by_mix(&corpora, &mix(&[("b", 1.0)]), 1, 0).unwrap_err();
        assert_eq!(err, CorpusError::UnknownDomain("b".into()));
    }

    #[test]
    fn seeds_change_selection_not_counts() {
        let mut corpora = BTreeMap::new();
        corpora.insert("a".to_string(), docs("a", 2000));
        corpora.insert("b".to_string(), docs("b", 2000));
        let m = mix(&[("a", 0.5), ("b", 0.5)]);
        let count = |v: &[WebDocument], d: &str| v.iter().filter(|x| x.domain == d).count();
        let r1 = sample_by_mix(&corpora, &m, 1000, 1).unwrap();
        let r1b = sample_by_mix(&corpora, &m, 1000, 1).unwrap();
        let r2 = sample_by_mix(&corpora, &m, 1000, 2).unwrap();
        assert_eq!((count(&r1, "a"), count(&r1, "b")), (500, 500));
        assert_eq!((count(&r2, "a"), count(&r2, "b")), (500, 500));
        assert_eq!(r1, r1b);
        let ids1: BTreeSet<_> = r1.iter().map(|d| d.id.clone()).collect();
        let ids2: BTreeSet<_> = r2.iter().map(|d| d.id.clone()).collect();
        assert_ne!(ids1, ids2);
        assert_eq!(ids1.len(), 1000);
    }

    #[test]
    fn truncation_prefers_whitespace() {
        assert_eq!(truncate_at_whitespace("hello world", 8), ("hello", true));
        assert_eq!(truncate_at_whitespace("hello", 8), ("hello", false));
        assert_eq!(truncate_at_whitespace("abcdefghij", 4), ("abcd", true));
        let d = WebDocument::new("x", "  héllo wörld ", "g", None, 100).unwrap();
        assert_eq!(d.char_count, 11);
        assert!(WebDocument::new("x", " \n\t", "g", None, 100).is_err());
    }

    proptest::proptest! {
        #[test]
        fn allotment_sums_to_n(raw in proptest::collection::vec(1u32..1000, 1..8), n in 1usize..200_000) {
            let total: u32 = raw.iter().sum();
            let entries: Vec<(String, f64)> = raw
                .iter()
                .enumerate()
                .map(|(i, w)| (format!("d{i}"), *w as f64 / total as f64))
                .collect();
            if let Ok(m) = DomainMix::new(entries) {
                let sum: usize = m.allot(n).iter().map(|c| c.1).sum();
                proptest::prop_assert_eq!(sum, n);
            }
        }

        #[test]
        fn truncation_respects_limit(text in "[a-z ]{0,60}[a-z]", limit in 1usize..50) {
            let (cut, _) = truncate_at_whitespace(&text, limit);
            proptest::prop_assert!(cut.chars().count() <= limit);
            proptest::prop_assert!(text.starts_with(cut));
        }
    }
}
