//! Deterministic seed derivation.
//!
//! Every random decision in the pipeline (sampling, branch and scope draws,
//! per-call backend seeds, MinHash salts) is derived from a small number of
//! user-facing seeds through these mixers, so replays do not depend on
//! scheduling or iteration order.

use xxhash_rust::xxh3::xxh3_64_with_seed;

/// SplitMix64 finalizer. A bijection on `u64`.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream of well-spread `u64`s starting from `seed`.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        mix64(self.state)
    }
}

pub fn hash_bytes(bytes: &[u8], seed: u64) -> u64 {
    xxh3_64_with_seed(bytes, seed)
}

pub fn hash_str(s: &str, seed: u64) -> u64 {
    hash_bytes(s.as_bytes(), seed)
}

/// Combine a parent seed with a label; used to split independent streams.
pub fn derive(parent: u64, label: &str) -> u64 {
    mix64(parent ^ hash_str(label, 0x5745_4252))
}

/// Seed of a synthesis task: a pure function of the run seed and document id.
pub fn task_seed(run_seed: u64, doc_id: &str) -> u64 {
    mix64(run_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ hash_str(doc_id, 0x7461_736b))
}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
pub fn unit_f64(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
