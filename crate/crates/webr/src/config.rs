//! Run configuration.
//!
//! A single TOML file. Every setting has a flat dotted key (`mix.general`,
//! `backend.max_in_flight`, `ablation.no_refine`, ...), which is also how
//! configs are digested for checkpoint validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use webr_core::complete::{ApproxTokenCounter, TokenCounter};
use webr_core::corpus::DomainMix;
use webr_core::cost::{GenerationParams, GenerationPlan, Price, Prices};
use webr_core::dedup::DedupParams;
use webr_core::synthesis::{check_p_part, Ablations, BranchRatio};
use webr_core::template::{self, Template, TemplateSet};

use crate::corpus::LoadOptions;
use crate::gateway::{http::HttpBackend, Backend, Gateway, MockBackend, RetryPolicy};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSource {
    pub path: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    /// Overrides `ceil(target_pairs * oversample_factor)`.
    pub n: Option<usize>,
    /// Defaults to `run_seed`.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub max_chars: usize,
    pub min_chars: usize,
    pub fail_fast: bool,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let d = LoadOptions::default();
        Self {
            max_chars: d.max_chars,
            min_chars: d.min_chars,
            fail_fast: d.fail_fast,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub base_url: String,
    pub api_key_env: String,
    pub max_in_flight: usize,
    pub context_limit: u64,
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub timeout_secs: u64,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            max_in_flight: 8,
            context_limit: 128_000,
            max_attempts: 5,
            base_delay_ms: 1000,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MockSection {
    pub empty_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOverride {
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub max_output_tokens: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationSection {
    pub model: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_output_tokens: u32,
    pub stages: BTreeMap<String, StageOverride>,
}

impl Default for GenerationSection {
    fn default() -> Self {
        let p = GenerationParams::gpt_4o_mini();
        Self {
            model: p.model,
            temperature: p.temperature,
            top_p: p.top_p,
            max_output_tokens: p.max_output_tokens,
            stages: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PricesSection {
    #[serde(rename = "input_per_1M")]
    pub input_per_1m: f64,
    #[serde(rename = "output_per_1M")]
    pub output_per_1m: f64,
}

impl Default for PricesSection {
    fn default() -> Self {
        Self {
            input_per_1m: 0.075,
            output_per_1m: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisSection {
    pub ratio_wai: f64,
    pub ratio_war: f64,
    pub p_part: f64,
    pub persona_max_chars: usize,
}

impl Default for SynthesisSection {
    fn default() -> Self {
        Self {
            ratio_wai: 2.0,
            ratio_war: 1.0,
            p_part: 0.5,
            persona_max_chars: webr_core::synthesis::DEFAULT_PERSONA_MAX_CHARS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DedupSection {
    pub ngram: usize,
    pub num_perm: usize,
    pub threshold: f64,
    pub bands: usize,
    pub rows_per_band: usize,
    pub seed: u64,
}

impl Default for DedupSection {
    fn default() -> Self {
        let d = DedupParams::default();
        Self {
            ngram: d.ngram,
            num_perm: webr_core::dedup::SIGNATURE_LEN,
            threshold: d.threshold,
            bands: d.bands,
            rows_per_band: d.rows_per_band,
            seed: d.seed,
        }
    }
}

impl DedupSection {
    pub fn params(&self) -> Result<DedupParams, ConfigError> {
        if self.num_perm != webr_core::dedup::SIGNATURE_LEN {
            return Err(invalid(format!(
                "dedup.num_perm must be {}",
                webr_core::dedup::SIGNATURE_LEN
            )));
        }
        let p = DedupParams {
            ngram: self.ngram,
            threshold: self.threshold,
            bands: self.bands,
            rows_per_band: self.rows_per_band,
            seed: self.seed,
        };
        p.validate().map_err(invalid)?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplatesSection {
    pub dir: PathBuf,
}

impl Default for TemplatesSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("templates"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Hashing,
    File,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub token_bin_width: u64,
    pub diversity: bool,
    pub diversity_n: usize,
    pub embedder: EmbedderKind,
    pub embeddings_path: Option<PathBuf>,
    pub embed_url: Option<String>,
    pub embed_model: String,
    pub hashing_dim: usize,
    pub judge: bool,
    /// Defaults to `judge.txt` in the template directory.
    pub judge_template: Option<PathBuf>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            token_bin_width: 64,
            diversity: false,
            diversity_n: 10_000,
            embedder: EmbedderKind::Hashing,
            embeddings_path: None,
            embed_url: None,
            embed_model: "all-mpnet-base-v2".into(),
            hashing_dim: 256,
            judge: false,
            judge_template: None,
        }
    }
}

fn default_seed() -> u64 {
    42
}
fn default_target() -> usize {
    100_000
}
fn default_oversample() -> f64 {
    1.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub run_seed: u64,
    #[serde(default = "default_target")]
    pub target_pairs: usize,
    #[serde(default = "default_oversample")]
    pub oversample_factor: f64,
    pub corpora: BTreeMap<String, CorpusSource>,
    pub mix: BTreeMap<String, f64>,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub mock: MockSection,
    #[serde(default)]
    pub generation: GenerationSection,
    #[serde(default)]
    pub prices: PricesSection,
    #[serde(default)]
    pub synthesis: SynthesisSection,
    #[serde(default)]
    pub ablation: Ablations,
    #[serde(default)]
    pub dedup: DedupSection,
    #[serde(default)]
    pub templates: TemplatesSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

impl RunConfig {
    /// Parses and validates a config; relative paths resolve against `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text)?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for c in self.corpora.values_mut() {
            fix(&mut c.path);
        }
        fix(&mut self.templates.dir);
        fix(&mut self.output.dir);
        if let Some(p) = &mut self.analysis.embeddings_path {
            fix(p);
        }
        if let Some(p) = &mut self.analysis.judge_template {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.domain_mix()?;
        for d in self.mix.keys() {
            if !self.corpora.contains_key(d) {
                return Err(invalid(format!("mix domain {d:?} has no corpora.{d}.path")));
            }
        }
        if self.target_pairs == 0 {
            return Err(invalid("target_pairs must be positive"));
        }
        if !(self.oversample_factor >= 1.0 && self.oversample_factor.is_finite()) {
            return Err(invalid("oversample_factor must be >= 1"));
        }
        if self.sample.n == Some(0) {
            return Err(invalid("sample.n must be positive"));
        }
        BranchRatio::new(self.synthesis.ratio_wai, self.synthesis.ratio_war).map_err(invalid)?;
        check_p_part(self.synthesis.p_part).map_err(invalid)?;
        if self.synthesis.persona_max_chars == 0 {
            return Err(invalid("synthesis.persona_max_chars must be positive"));
        }
        self.dedup.params()?;
        self.generation_plan()?;
        self.prices()?;
        if self.backend.max_in_flight == 0 {
            return Err(invalid("backend.max_in_flight must be positive"));
        }
        if self.backend.max_attempts == 0 {
            return Err(invalid("backend.max_attempts must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mock.empty_rate) {
            return Err(invalid("mock.empty_rate must be in [0, 1]"));
        }
        if self.analysis.token_bin_width == 0 {
            return Err(invalid("analysis.token_bin_width must be positive"));
        }
        Ok(())
    }

    pub fn domain_mix(&self) -> Result<DomainMix, ConfigError> {
        DomainMix::new(self.mix.iter().map(|(d, w)| (d.clone(), *w))).map_err(invalid)
    }

    pub fn ratio(&self) -> BranchRatio {
        BranchRatio::new(self.synthesis.ratio_wai, self.synthesis.ratio_war)
            .expect("validated at load")
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            max_chars: self.corpus.max_chars,
            min_chars: self.corpus.min_chars,
            fail_fast: self.corpus.fail_fast,
        }
    }

    /// Size of the sampled pool.
    pub fn sample_size(&self) -> usize {
        self.sample.n.unwrap_or_else(|| {
            let exact = self.target_pairs as f64 * self.oversample_factor;
            (exact - 1e-9).ceil().max(1.0) as usize
        })
    }

    pub fn sample_seed(&self) -> u64 {
        self.sample.seed.unwrap_or(self.run_seed)
    }

    pub fn generation_plan(&self) -> Result<GenerationPlan, ConfigError> {
        let g = &self.generation;
        let default = GenerationParams::new(&g.model, g.temperature, g.top_p, g.max_output_tokens)
            .map_err(invalid)?;
        let mut plan = GenerationPlan::uniform(default.clone());
        for (stage, o) in &g.stages {
            let p = GenerationParams::new(
                o.model.clone().unwrap_or_else(|| default.model.clone()),
                o.temperature.unwrap_or(default.temperature),
                o.top_p.unwrap_or(default.top_p),
                o.max_output_tokens.unwrap_or(default.max_output_tokens),
            )
            .map_err(|e| invalid(format!("generation.stages.{stage}: {e}")))?;
            plan.overrides.insert(stage.clone(), p);
        }
        Ok(plan)
    }

    pub fn prices(&self) -> Result<Prices, ConfigError> {
        Ok(Prices {
            input: Price::from_dollars_per_million(self.prices.input_per_1m).map_err(invalid)?,
            output: Price::from_dollars_per_million(self.prices.output_per_1m).map_err(invalid)?,
        })
    }

    pub fn templates(&self) -> Result<TemplateSet, ConfigError> {
        let sources = read_template_sources(&self.templates.dir)?;
        TemplateSet::from_sources(&sources).map_err(invalid)
    }

    pub fn judge_template_path(&self) -> PathBuf {
        self.analysis
            .judge_template
            .clone()
            .unwrap_or_else(|| self.templates.dir.join("judge.txt"))
    }

    pub fn judge_template(&self) -> Result<Template, ConfigError> {
        let text = read(&self.judge_template_path())?;
        Template::parse(template::name::JUDGE, &text, template::required_slots(template::name::JUDGE))
            .map_err(invalid)
    }

    pub fn token_counter(&self) -> Arc<dyn TokenCounter> {
        Arc::new(ApproxTokenCounter)
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.backend.max_attempts,
            base_delay: Duration::from_millis(self.backend.base_delay_ms),
            factor: 2.0,
        }
    }

    /// Builds the gateway; the API key is read from `backend.api_key_env`.
    pub fn gateway(&self) -> Result<Gateway, ConfigError> {
        let counter = self.token_counter();
        let backend: Box<dyn Backend> = match self.backend.kind {
            BackendKind::Mock => Box::new(MockBackend::new(counter.clone(), self.mock.empty_rate)),
            BackendKind::Http => {
                let key = std::env::var(&self.backend.api_key_env).ok();
                if key.is_none() {
                    log::warn!("{} is not set; sending requests without a key", self.backend.api_key_env);
                }
                Box::new(HttpBackend::new(
                    &self.backend.base_url,
                    key,
                    counter.clone(),
                    Duration::from_secs(self.backend.timeout_secs),
                ))
            }
        };
        Ok(Gateway::new(
            backend,
            counter,
            self.backend.max_in_flight,
            self.backend.context_limit,
            self.retry_policy(),
        ))
    }

    /// Flat `key = value` view, sorted by key.
    pub fn flatten(&self) -> BTreeMap<String, String> {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut out = BTreeMap::new();
        flatten_into("", &value, &mut out);
        out
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_template_sources(dir: &Path) -> Result<BTreeMap<String, String>, ConfigError> {
    template::name::SYNTHESIS
        .iter()
        .map(|n| Ok((n.to_string(), read(&dir.join(format!("{n}.txt")))?)))
        .collect()
}

fn flatten_into(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of the selected `key = value` lines.
pub fn digest_entries<'a>(entries: impl IntoIterator<Item = (&'a String, &'a String)>) -> String {
    let mut h = Sha256::new();
    for (k, v) in entries {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [corpora.general]
        path = "general.jsonl"
        [mix]
        general = 1.0
    "#;

    #[test]
    fn defaults_match_published_setup() {
        let c = RunConfig::from_toml_str(MINIMAL, Path::new("/base")).unwrap();
        assert_eq!(c.target_pairs, 100_000);
        assert_eq!(c.sample_size(), 120_000);
        assert_eq!(c.ratio().p_wai(), 2.0 / 3.0);
        assert_eq!(c.synthesis.p_part, 0.5);
        let d = c.dedup.params().unwrap();
        assert_eq!((d.threshold, d.bands, d.rows_per_band, d.ngram), (0.7, 16, 8, 3));
        assert_eq!(c.prices().unwrap(), Prices::GPT_4O_MINI_BATCH);
        assert_eq!(c.corpora["general"].path, Path::new("/base/general.jsonl"));
        assert_eq!(c.generation.temperature, 0.7);
    }

    #[test]
    fn oversampled_pool_rounds_up() {
        let mut c = RunConfig::from_toml_str(MINIMAL, Path::new(".")).unwrap();
        c.target_pairs = 500;
        assert_eq!(c.sample_size(), 600);
        c.target_pairs = 7;
        assert_eq!(c.sample_size(), 9);
        c.sample.n = Some(3);
        assert_eq!(c.sample_size(), 3);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            "[dedup]\nbands = 10",
            "[dedup]\nnum_perm = 64",
            "[synthesis]\np_part = 1.5",
            "[synthesis]\nratio_wai = 0\nratio_war = 0",
            "oversample_factor = 0.9",
            "[generation]\ntop_p = 0.0",
            "[unknown]\nx = 1",
        ];
        for extra in bad {
            let text = format!("{extra}\n{MINIMAL}");
            assert!(RunConfig::from_toml_str(&text, Path::new(".")).is_err(), "{extra}");
        }
        let unknown_domain = "[corpora.a]\npath='a'\n[mix]\nb = 1.0";
        assert!(RunConfig::from_toml_str(unknown_domain, Path::new(".")).is_err());
    }

    #[test]
    fn flattened_keys() {
        let c = RunConfig::from_toml_str(MINIMAL, Path::new("/b")).unwrap();
        let flat = c.flatten();
        assert_eq!(flat["mix.general"], "1.0");
        assert_eq!(flat["dedup.threshold"], "0.7");
        assert_eq!(flat["ablation.no_refine"], "false");
        assert!(flat.contains_key("backend.max_in_flight"));
        assert!(flat.contains_key("prices.input_per_1M"));
    }

    #[test]
    fn per_stage_overrides() {
        let text = format!(
            "{MINIMAL}\n[generation.stages.war_refine]\nmodel = \"big\"\ntemperature = 0.2\n"
        );
        let c = RunConfig::from_toml_str(&text, Path::new(".")).unwrap();
        let plan = c.generation_plan().unwrap();
        assert_eq!(plan.for_stage("war_refine").model, "big");
        assert_eq!(plan.for_stage("persona").model, "gpt-4o-mini");
    }
}
