//! Deterministic offline backend.
//!
//! Output is pseudo-text drawn from a fixed vocabulary with a ChaCha stream
//! seeded by `hash(prompt, params, seed)`. The mock reads the prompt the way
//! a cooperative model would: if the prompt asks for an answer inside one of
//! the structured tags the answer is wrapped in that tag, and judge prompts
//! get a `quality: q, difficulty: d` line.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::complete::{Complete, CompletionRequest, GatewayError, TokenCounter};
use crate::cost::{Completion, GenerationParams};
use crate::seed;
use crate::template::tag;

pub const BACKEND_ID: &str = "mock";

const VOCAB: &[&str] = &[
    "analysis", "account", "balance", "basic", "bridge", "budget", "careful", "cell", "chart",
    "clear", "climate", "code", "common", "compare", "concept", "context", "core", "cost",
    "data", "debate", "define", "design", "detail", "device", "diagram", "direct", "document",
    "draft", "early", "effect", "energy", "engine", "error", "estimate", "event", "example",
    "explain", "factor", "feature", "field", "figure", "final", "focus", "format", "frame",
    "function", "garden", "general", "graph", "growth", "guide", "health", "history", "idea",
    "image", "impact", "index", "input", "issue", "journal", "kernel", "key", "label",
    "layer", "lesson", "level", "limit", "list", "local", "logic", "market", "matrix",
    "measure", "method", "model", "module", "moment", "motion", "network", "note", "number",
    "object", "option", "order", "output", "outline", "paper", "pattern", "period", "plan",
    "point", "policy", "practice", "price", "process", "product", "project", "proof",
    "protein", "quality", "query", "range", "rate", "reason", "record", "region", "report",
    "result", "review", "risk", "rule", "sample", "scale", "schema", "science", "section",
    "series", "signal", "simple", "source", "space", "stage", "standard", "state", "step",
    "story", "structure", "study", "style", "summary", "system", "table", "task", "teacher",
    "term", "test", "theory", "time", "topic", "trade", "trend", "type", "unit", "update",
    "value", "vector", "version", "view", "volume", "water", "weight", "window", "world",
    "write", "yield", "zone", "about", "across", "after", "again", "always", "among", "around",
    "because", "before", "between", "both", "carefully", "clearly", "could", "during", "each",
    "either", "every", "first", "from", "given", "into", "itself", "later", "many", "more",
    "most", "never", "often", "only", "other", "over", "quickly", "rather", "should", "since",
    "some", "still", "such", "than", "their", "then", "there", "these", "through", "under",
    "until", "using", "very", "what", "when", "where", "which", "while", "with", "within",
    "without", "would", "alpha", "beta", "gamma", "delta", "sigma", "omega", "prime", "linear",
    "binary", "random", "stable", "formal", "urban", "rural", "medical", "legal", "finance",
    "nutrition", "physics", "chemistry", "biology", "geometry", "algebra", "calculus",
];

const ROLES: &[&str] = &[
    "software engineer",
    "GPU performance engineer",
    "high school mathematics teacher",
    "financial analyst",
    "clinical researcher",
    "travel blogger",
    "graduate student in physics",
    "technical writer",
    "small business owner",
    "data scientist",
    "public health official",
    "hobbyist gardener",
    "sports journalist",
    "open-source maintainer",
    "history enthusiast",
    "nutritionist",
];

fn request_seed(prompt: &str, params: &GenerationParams, seed: u64) -> u64 {
    let mut h = seed::hash_str(prompt, seed);
    h = seed::mix64(h ^ seed::hash_str(&params.model, 1));
    h = seed::mix64(h ^ params.temperature.to_bits());
    h = seed::mix64(h ^ params.top_p.to_bits().rotate_left(17));
    seed::mix64(h ^ params.max_output_tokens as u64)
}

/// The structured tag the prompt asks for, judged by the last occurrence of
/// any known opening tag.
fn requested_tag(prompt: &str) -> Option<&'static str> {
    tag::ALL
        .iter()
        .filter_map(|t| prompt.rfind(&alloc::format!("<{t}>")).map(|pos| (pos, *t)))
        .max_by_key(|(pos, _)| *pos)
        .map(|(_, t)| t)
}

fn is_judge_prompt(prompt: &str) -> bool {
    prompt.to_ascii_lowercase().contains("difficulty:")
}

fn words(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    let n = rng.random_range(min..=max);
    let mut out = String::new();
    let mut sentence_len = 0usize;
    for i in 0..n {
        let w = VOCAB[rng.random_range(0..VOCAB.len())];
        if sentence_len == 0 {
            let mut cs = w.chars();
            if let Some(c) = cs.next() {
                out.extend(c.to_uppercase());
                out.push_str(cs.as_str());
            }
        } else {
            out.push_str(w);
        }
        sentence_len += 1;
        let end = i + 1 == n || (sentence_len >= 6 && rng.random_bool(0.15));
        if end {
            out.push('.');
            sentence_len = 0;
        }
        if i + 1 != n {
            out.push(' ');
        }
    }
    out
}

/// Long alphabetic words in the prompt, used to make personas topical.
fn topic_words(prompt: &str) -> Vec<&str> {
    let mut v: Vec<&str> = prompt
        .split(|c: char| !c.is_alphabetic())
        .filter(|w| w.chars().count() >= 7)
        .collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn body_for(prompt: &str, rng: &mut ChaCha8Rng) -> String {
    if is_judge_prompt(prompt) {
        let q = rng.random_range(1..=5u8);
        let d = rng.random_range(1..=5u8);
        return alloc::format!("quality: {q}, difficulty: {d}");
    }
    match requested_tag(prompt) {
        Some(tag::PERSONA) => {
            let role = ROLES[rng.random_range(0..ROLES.len())];
            let topics = topic_words(prompt);
            let topic = if topics.is_empty() {
                VOCAB[rng.random_range(0..VOCAB.len())]
            } else {
                topics[rng.random_range(0..topics.len())]
            };
            alloc::format!(
                "<persona>A {role} who writes about {} {}</persona>",
                topic.to_lowercase(),
                words(rng, 8, 24)
            )
        }
        Some(tag::REQUEST) => alloc::format!("<request>{}</request>", words(rng, 12, 40)),
        Some(tag::INSTRUCTION) => {
            alloc::format!("<instruction>{}</instruction>", words(rng, 8, 30))
        }
        _ => words(rng, 40, 160),
    }
}

/// Deterministic completion for `(prompt, params, seed)`.
pub fn mock_complete(
    prompt: &str,
    params: &GenerationParams,
    seed: u64,
    counter: &dyn TokenCounter,
) -> Completion {
    let mut rng = ChaCha8Rng::seed_from_u64(request_seed(prompt, params, seed));
    let mut text = body_for(prompt, &mut rng);
    let cap = params.max_output_tokens as u64;
    while counter.count(&text) > cap {
        match text.trim_end().rfind(' ') {
            Some(cut) => text.truncate(cut),
            None => {
                let keep = text.chars().take(cap as usize).count();
                let idx = text.char_indices().nth(keep).map_or(text.len(), |(i, _)| i);
                text.truncate(idx);
                break;
            }
        }
    }
    Completion {
        input_tokens: counter.count(prompt),
        output_tokens: counter.count(&text),
        text,
        backend_id: BACKEND_ID.into(),
        latency_ms: 0,
    }
}

/// [`mock_complete`] behind the [`Complete`] trait, with optional injection
/// of empty completions at a fixed rate.
pub struct MockCompleter<C> {
    pub counter: C,
    pub empty_rate: f64,
}

impl<C: TokenCounter> MockCompleter<C> {
    pub fn new(counter: C) -> Self {
        Self {
            counter,
            empty_rate: 0.0,
        }
    }
}

impl<C: TokenCounter> Complete for MockCompleter<C> {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, GatewayError> {
        if request.prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        if self.empty_rate > 0.0 {
            let draw = seed::unit_f64(seed::mix64(
                request_seed(&request.prompt, &request.params, request.seed) ^ 0xe4e4,
            ));
            if draw < self.empty_rate {
                return Err(GatewayError::EmptyCompletion);
            }
        }
        Ok(mock_complete(
            &request.prompt,
            &request.params,
            request.seed,
            &self.counter,
        ))
    }
}
