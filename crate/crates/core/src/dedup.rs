//! MinHash signatures and LSH banding for near-duplicate removal.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::seed::{self, SplitMix64};

pub const SIGNATURE_LEN: usize = 128;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DedupError {
    #[error("cannot sign an empty shingle set")]
    EmptySet,
    #[error("signatures come from different hash families ({0} vs {1})")]
    SeedMismatch(u64, u64),
    #[error("bands ({bands}) x rows_per_band ({rows}) must equal {SIGNATURE_LEN}")]
    Banding { bands: usize, rows: usize },
    #[error("threshold must be in (0, 1], got {0}")]
    Threshold(f64),
    #[error("n-gram size must be positive")]
    NGram,
}

/// Word n-grams of a normalized text.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ShingleSet {
    pub grams: BTreeSet<String>,
}

impl ShingleSet {
    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }

    pub fn jaccard(&self, other: &ShingleSet) -> f64 {
        if self.is_empty() && other.is_empty() {
            return 1.0;
        }
        let inter = self.grams.intersection(&other.grams).count();
        let union = self.len() + other.len() - inter;
        inter as f64 / union as f64
    }
}

fn normalize_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Lowercased word `n`-grams; texts shorter than `n` words give a single
/// gram holding the whole normalized text.
pub fn shingle(text: &str, n: usize) -> ShingleSet {
    let n = n.max(1);
    let tokens = normalize_tokens(text);
    let mut grams = BTreeSet::new();
    if tokens.is_empty() {
        return ShingleSet { grams };
    }
    if tokens.len() < n {
        grams.insert(tokens.join(" "));
    } else {
        for w in tokens.windows(n) {
            grams.insert(w.join(" "));
        }
    }
    ShingleSet { grams }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupParams {
    pub ngram: usize,
    pub threshold: f64,
    pub bands: usize,
    pub rows_per_band: usize,
    pub seed: u64,
}

impl Default for DedupParams {
    fn default() -> Self {
        Self {
            ngram: 3,
            threshold: 0.7,
            bands: 16,
            rows_per_band: 8,
            seed: 0x6d69_6e68,
        }
    }
}

impl DedupParams {
    pub fn validate(&self) -> Result<(), DedupError> {
        if self.bands * self.rows_per_band != SIGNATURE_LEN {
            return Err(DedupError::Banding {
                bands: self.bands,
                rows: self.rows_per_band,
            });
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(DedupError::Threshold(self.threshold));
        }
        if self.ngram == 0 {
            return Err(DedupError::NGram);
        }
        Ok(())
    }
}

/// 128 seeded 64-bit hash functions over gram bytes.
///
/// `h_i(g) = mix64(xxh3(g; seed) ^ salt_i)`; `mix64` is a bijection, so two
/// grams collide under some `h_i` only if their base hashes collide.
#[derive(Debug, Clone)]
pub struct HashFamily {
    seed: u64,
    salts: [u64; SIGNATURE_LEN],
}

impl HashFamily {
    pub fn new(seed: u64) -> Self {
        let mut sm = SplitMix64::new(seed);
        let mut salts = [0u64; SIGNATURE_LEN];
        for s in &mut salts {
            *s = sm.next_u64();
        }
        Self { seed, salts }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn signature(&self, set: &ShingleSet) -> Result<MinHashSignature, DedupError> {
        if set.is_empty() {
            return Err(DedupError::EmptySet);
        }
        let mut values = [u64::MAX; SIGNATURE_LEN];
        for gram in &set.grams {
            let base = seed::hash_str(gram, self.seed);
            for (v, salt) in values.iter_mut().zip(&self.salts) {
                let h = seed::mix64(base ^ salt);
                if h < *v {
                    *v = h;
                }
            }
        }
        Ok(MinHashSignature {
            values,
            seed_id: self.seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinHashSignature {
    pub values: [u64; SIGNATURE_LEN],
    pub seed_id: u64,
}

/// Fraction of signature positions that agree.
pub fn estimate_jaccard(a: &MinHashSignature, b: &MinHashSignature) -> Result<f64, DedupError> {
    if a.seed_id != b.seed_id {
        return Err(DedupError::SeedMismatch(a.seed_id, b.seed_id));
    }
    let eq = a.values.iter().zip(&b.values).filter(|(x, y)| x == y).count();
    Ok(eq as f64 / SIGNATURE_LEN as f64)
}

/// Banded index: two signatures become candidates when any band matches.
#[derive(Debug, Clone)]
pub struct LshIndex {
    rows: usize,
    buckets: Vec<BTreeMap<u64, Vec<usize>>>,
}

impl LshIndex {
    pub fn new(bands: usize, rows_per_band: usize) -> Self {
        Self {
            rows: rows_per_band,
            buckets: (0..bands).map(|_| BTreeMap::new()).collect(),
        }
    }

    fn band_keys<'a>(&'a self, sig: &'a MinHashSignature) -> impl Iterator<Item = u64> + 'a {
        (0..self.buckets.len()).map(move |b| {
            let mut bytes = [0u8; 8 * SIGNATURE_LEN];
            let band = &sig.values[b * self.rows..(b + 1) * self.rows];
            for (i, v) in band.iter().enumerate() {
                bytes[i * 8..(i + 1) * 8].copy_from_slice(&v.to_le_bytes());
            }
            seed::hash_bytes(&bytes[..band.len() * 8], b as u64)
        })
    }

    pub fn insert(&mut self, id: usize, sig: &MinHashSignature) {
        let keys: Vec<u64> = self.band_keys(sig).collect();
        for (band, key) in keys.into_iter().enumerate() {
            self.buckets[band].entry(key).or_default().push(id);
        }
    }

    pub fn candidates(&self, sig: &MinHashSignature) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for (band, key) in self.band_keys(sig).enumerate() {
            if let Some(ids) = self.buckets[band].get(&key) {
                out.extend(ids.iter().copied());
            }
        }
        out
    }

    /// Whether two signatures share at least one band.
    pub fn is_candidate_pair(&self, a: &MinHashSignature, b: &MinHashSignature) -> bool {
        self.band_keys(a).zip(self.band_keys(b)).any(|(x, y)| x == y)
    }
}

/// Records that can be deduplicated: a canonical key and the text compared.
pub trait Dedupable {
    fn dedup_key(&self) -> &str;
    fn dedup_text(&self) -> &str;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DroppedRecord<T> {
    pub record: T,
    pub duplicate_of: String,
    pub estimated_jaccard: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DedupOutcome<T> {
    pub kept: Vec<T>,
    pub dropped: Vec<DroppedRecord<T>>,
}

/// Removes near duplicates, keeping the earliest record in key order.
///
/// Records are visited in ascending key order. Each one is checked against
/// the kept records proposed by the LSH index; it is dropped when the best
/// estimated Jaccard reaches the threshold, pointing at the lowest-keyed such
/// keeper. Texts with no tokens are never matched.
pub fn dedup<T: Dedupable>(records: Vec<T>, params: &DedupParams) -> Result<DedupOutcome<T>, DedupError> {
    params.validate()?;
    let family = HashFamily::new(params.seed);
    let mut records = records;
    records.sort_by(|a, b| a.dedup_key().cmp(b.dedup_key()));

    let mut index = LshIndex::new(params.bands, params.rows_per_band);
    let mut kept_sigs: Vec<MinHashSignature> = Vec::new();
    let mut kept_keys: Vec<String> = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();

    for rec in records {
        let set = shingle(rec.dedup_text(), params.ngram);
        let Ok(sig) = family.signature(&set) else {
            kept.push(rec);
            continue;
        };
        let mut hit: Option<(usize, f64)> = None;
        for cand in index.candidates(&sig) {
            let est = estimate_jaccard(&sig, &kept_sigs[cand])?;
            if est >= params.threshold {
                // candidates iterate in insertion order, which is key order
                hit = Some((cand, est));
                break;
            }
        }
        match hit {
            Some((keeper, est)) => dropped.push(DroppedRecord {
                record: rec,
                duplicate_of: kept_keys[keeper].clone(),
                estimated_jaccard: est,
            }),
            None => {
                let id = kept_sigs.len();
                index.insert(id, &sig);
                kept_keys.push(rec.dedup_key().to_string());
                kept_sigs.push(sig);
                kept.push(rec);
            }
        }
    }
    Ok(DedupOutcome { kept, dropped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[derive(Debug, Clone, PartialEq)]
    struct Rec(String, String);

    impl Dedupable for Rec {
        fn dedup_key(&self) -> &str {
            &self.0
        }
        fn dedup_text(&self) -> &str {
            &self.1
        }
    }

    fn rec(k: &str, t: &str) -> Rec {
        Rec(k.into(), t.into())
    }

    #[test]
    fn trigram_definition() {
        let s = shingle("A b c d", 3);
        let expect: BTreeSet<String> = ["a b c", "b c d"].iter().map(|s| s.to_string()).collect();
        assert_eq!(s.grams, expect);
        assert_eq!(shingle("hi", 3).grams.into_iter().collect::<Vec<_>>(), vec!["hi"]);
        assert_eq!(shingle("Hello, world!", 3).grams.into_iter().collect::<Vec<_>>(), vec!["hello world"]);
        assert!(shingle(" ... ", 3).is_empty());
    }

    #[test]
    fn signature_of_empty_set_fails() {
        assert_eq!(
            HashFamily::new(1).signature(&ShingleSet::default()),
            Err(DedupError::EmptySet)
        );
    }

    #[test]
    fn identical_sets_match_fully() {
        let f = HashFamily::new(3);
        let a = f.signature(&shingle("the quick brown fox jumps", 3)).unwrap();
        let b = f.signature(&shingle("The quick brown fox jumps", 3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(estimate_jaccard(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn seed_mismatch() {
        let s = shingle("one two three", 3);
        let a = HashFamily::new(1).signature(&s).unwrap();
        let b = HashFamily::new(2).signature(&s).unwrap();
        assert!(matches!(estimate_jaccard(&a, &b), Err(DedupError::SeedMismatch(1, 2))));
    }

    #[test]
    fn banding_validated() {
        let p = DedupParams {
            bands: 10,
            ..DedupParams::default()
        };
        assert!(matches!(p.validate(), Err(DedupError::Banding { .. })));
    }

    #[test]
    fn exact_duplicates_point_at_keeper() {
        let text = "please rewrite the following article as a short poem for children";
        let out = dedup(
            vec![rec("b", text), rec("a", text), rec("c", "something else entirely different here")],
            &DedupParams::default(),
        )
        .unwrap();
        assert_eq!(out.kept.iter().map(|r| r.0.as_str()).collect::<Vec<_>>(), vec!["a", "c"]);
        assert_eq!(out.dropped.len(), 1);
        assert_eq!(out.dropped[0].record.0, "b");
        assert_eq!(out.dropped[0].duplicate_of, "a");
        assert_eq!(out.dropped[0].estimated_jaccard, 1.0);
    }

    #[test]
    fn idempotent_and_order_independent() {
        let base = "alpha beta gamma delta epsilon zeta eta theta iota kappa lambda mu";
        let recs = vec![
            rec("d3", base),
            rec("d1", &alloc::format!("{base} nu")),
            rec("d2", "completely unrelated words about gardening and soil"),
            rec("d4", &alloc::format!("{base} xi")),
        ];
        let p = DedupParams::default();
        let once = dedup(recs.clone(), &p).unwrap();
        let mut reversed = recs.clone();
        reversed.reverse();
        let other = dedup(reversed, &p).unwrap();
        assert_eq!(once.kept, other.kept);
        let twice = dedup(once.kept.clone(), &p).unwrap();
        assert!(twice.dropped.is_empty());
        assert_eq!(twice.kept, once.kept);
    }

    proptest::proptest! {
        #[test]
        fn shingles_ignore_case(text in "[a-zA-Z ,.!]{0,80}") {
            proptest::prop_assert_eq!(shingle(&text, 3), shingle(&text.to_uppercase(), 3));
        }
    }
}
