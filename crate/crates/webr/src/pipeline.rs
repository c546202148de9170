//! Staged, checkpointed run from corpora to a finished dataset.
//!
//! Stages run strictly in order: sample, personas, instructions, deduped,
//! responses, final. Each writes a checkpoint. With `resume`, every leading
//! stage whose checkpoint still matches the config is loaded instead of
//! recomputed; the first mismatch and everything after it run again.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use webr_core::analysis::{self, DiversityReport, HashingEmbedder, JudgeReport, TokenStats};
use webr_core::complete::GatewayError;
use webr_core::corpus::{sample_by_mix, CorpusError, WebDocument};
use webr_core::cost::{stage as cost_stage, BudgetReport, CostLedger, GenerationPlan};
use webr_core::dedup::{dedup, DedupError, Dedupable};
use webr_core::seed;
use webr_core::synthesis::{
    DraftInstruction, InstructionResponsePair, Persona, SynthesisTask, Synthesizer, TaskError, TaskPlanner,
};
use webr_core::template::Template;

use crate::checkpoint::{write_atomic, CheckpointError, CheckpointStore, Stage};
use crate::config::{digest_entries, read_template_sources, sha256_hex, ConfigError, EmbedderKind, RunConfig};
use crate::corpus::{load_corpora, LoadError, LoadStats};
use crate::dataset::{self, Counts, DatasetError, DropStats, Manifest};
use crate::embed::{EmbedError, Embedder, FileEmbeddings, HttpEmbedder};
use crate::gateway::{Gateway, GatewayStats};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const DROPS_FILE: &str = "drops.jsonl";
pub const DEDUP_REPORT_FILE: &str = "dedup_report.jsonl";
pub const TOKENS_FILE: &str = "tokens.json";
pub const BUDGET_FILE: &str = "budget.json";
pub const BUDGET_TABLE_FILE: &str = "budget.txt";
pub const DIVERSITY_FILE: &str = "diversity.json";
pub const JUDGE_FILE: &str = "judge.json";
const OVERSAMPLE_NOTE: &str =
    "pool size before dedup is not published; the pool is oversampled by this factor and the surplus truncated in id order";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("sampling failed: {0}")]
    Sample(#[from] CorpusError),
    #[error("dedup failed: {0}")]
    Dedup(#[from] DedupError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("embedding failed: {0}")]
    Embed(#[from] EmbedError),
    #[error("analysis failed: {0}")]
    Analysis(String),
    #[error("stage {stage} failed: {message}; {resume_hint}")]
    Stage {
        stage: Stage,
        message: String,
        resume_hint: String,
    },
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub resume: bool,
    /// Stop once this stage is checkpointed.
    pub stop_after: Option<Stage>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    /// Set once the final stage has run.
    pub dataset: Option<PathBuf>,
    pub manifest: Option<Manifest>,
    pub pairs: usize,
    pub shortfall: usize,
    /// Cumulative over the run, including usage restored from checkpoints.
    pub ledger: CostLedger,
    /// Only the calls made by this invocation.
    pub session_ledger: CostLedger,
    pub resumed_from: Option<Stage>,
    pub stopped_after: Option<Stage>,
    pub gateway_stats: GatewayStats,
}

/// One document or pair that left the pipeline, and why.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropRecord {
    pub doc_id: String,
    pub stage: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupDrop {
    pub dropped_id: String,
    pub kept_id: String,
    pub estimated_jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SampledArtifact {
    docs: Vec<WebDocument>,
    load_stats: BTreeMap<String, LoadStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PersonaArtifact {
    personas: BTreeMap<String, Persona>,
    omitted: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct InstructionArtifact {
    drafts: Vec<DraftInstruction>,
    drops: Vec<DropRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DedupArtifact {
    kept: Vec<DraftInstruction>,
    dropped: Vec<DedupDrop>,
    truncated: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResponseArtifact {
    pairs: Vec<InstructionResponsePair>,
    drops: Vec<DropRecord>,
}

/// Config keys each stage depends on, cumulative in stage order.
fn stage_prefixes(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Sampled => &["run_seed", "target_pairs", "oversample_factor", "corpora.", "mix.", "sample.", "corpus."],
        Stage::Personas => &[
            "ablation.no_persona",
            "synthesis.persona_max_chars",
            "generation.",
            "backend.kind",
            "backend.base_url",
            "backend.context_limit",
            "mock.",
        ],
        Stage::Instructions => &["synthesis.", "ablation.no_part"],
        Stage::Deduped => &["dedup.", "ablation.no_minhash"],
        Stage::Responses => &["ablation.no_refine"],
        Stage::Final => &["prices.", "analysis."],
    }
}

/// Locations are left out of digests; the content behind them is digested
/// separately where it matters.
fn is_path_key(key: &str) -> bool {
    key.ends_with(".path") || matches!(key, "analysis.embeddings_path" | "analysis.judge_template")
}

/// Digest of every config key relevant up to and including `stage`, plus the
/// content of the corpus files and templates those keys point at.
pub fn stage_digests(cfg: &RunConfig) -> Result<BTreeMap<Stage, String>, PipelineError> {
    let flat = cfg.flatten();
    let mut extra = BTreeMap::new();
    for (domain, src) in &cfg.corpora {
        let bytes = std::fs::read(&src.path).map_err(|source| LoadError::Io {
            path: src.path.clone(),
            source,
        })?;
        extra.insert(format!("corpora.{domain}.content"), sha256_hex(&bytes));
    }
    let mut template_entries = BTreeMap::new();
    for (name, text) in read_template_sources(&cfg.templates.dir)? {
        template_entries.insert(format!("templates.{name}"), sha256_hex(text.as_bytes()));
    }

    let mut prefixes: Vec<&str> = Vec::new();
    let mut out = BTreeMap::new();
    for stage in Stage::ALL {
        prefixes.extend_from_slice(stage_prefixes(stage));
        let mut entries: BTreeMap<String, String> = flat
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.as_str() == *p || (p.ends_with('.') && k.starts_with(p))))
            .filter(|(k, _)| !is_path_key(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        entries.extend(extra.clone());
        if stage >= Stage::Personas {
            entries.extend(template_entries.clone());
        }
        if stage == Stage::Final && cfg.analysis.judge {
            let path = cfg.judge_template_path();
            let bytes = std::fs::read(&path).map_err(|source| ConfigError::Io { path, source })?;
            entries.insert("templates.judge".into(), sha256_hex(&bytes));
        }
        out.insert(stage, digest_entries(&entries));
    }
    Ok(out)
}

struct Checkpoints<'a> {
    store: CheckpointStore,
    digests: BTreeMap<Stage, String>,
    gateway: &'a Gateway,
    loading: bool,
    base_ledger: CostLedger,
    resumed_from: Option<Stage>,
    last_done: Option<Stage>,
}

impl Checkpoints<'_> {
    fn ledger(&self) -> CostLedger {
        let mut l = self.base_ledger.clone();
        l.merge(&self.gateway.ledger());
        l
    }

    fn resume_hint(&self) -> String {
        match self.last_done {
            Some(s) => format!("rerun with --resume to continue after checkpoint {s}"),
            None => "no checkpoint was written".into(),
        }
    }

    fn stage_error(&self, stage: Stage, message: impl std::fmt::Display) -> PipelineError {
        PipelineError::Stage {
            stage,
            message: message.to_string(),
            resume_hint: self.resume_hint(),
        }
    }

    /// Loads `stage` from its checkpoint when possible, otherwise computes
    /// and checkpoints it.
    fn run<T, F>(&mut self, stage: Stage, compute: F) -> Result<T, PipelineError>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce(&Self) -> Result<T, PipelineError>,
    {
        let digest = self.digests[&stage].clone();
        if self.loading {
            if let Some((payload, ledger)) = self.store.load::<T>(stage, &digest) {
                log::info!("stage {stage}: restored from checkpoint");
                self.base_ledger = ledger;
                self.resumed_from = Some(stage);
                self.last_done = Some(stage);
                return Ok(payload);
            }
            self.loading = false;
        }
        log::info!("stage {stage}: running");
        let payload = compute(self)?;
        self.store.save(stage, &payload, &digest, &self.ledger())?;
        self.last_done = Some(stage);
        Ok(payload)
    }
}

fn thread_pool(n: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build()
        .expect("thread pool")
}

pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutcome, PipelineError> {
    let gateway = cfg.gateway()?;
    run_with_gateway(cfg, &gateway, opts)
}

/// Runs against an existing gateway. All calls share its ledger and limits.
pub fn run_with_gateway(cfg: &RunConfig, gateway: &Gateway, opts: &RunOptions) -> Result<RunOutcome, PipelineError> {
    let out_dir = cfg.output.dir.clone();
    let templates = cfg.templates()?;
    let plan = cfg.generation_plan()?;
    let planner = TaskPlanner {
        run_seed: cfg.run_seed,
        ratio: cfg.ratio(),
        p_part: cfg.synthesis.p_part,
        no_part: cfg.ablation.no_part,
    };
    let pool = thread_pool(cfg.backend.max_in_flight);
    let mut ck = Checkpoints {
        store: CheckpointStore::new(out_dir.join("checkpoints")),
        digests: stage_digests(cfg)?,
        gateway,
        loading: opts.resume,
        base_ledger: CostLedger::new(),
        resumed_from: None,
        last_done: None,
    };
    let synth = Synthesizer {
        backend: gateway,
        templates: &templates,
        plan: &plan,
        counter: gateway.counter().as_ref(),
        persona_max_chars: cfg.synthesis.persona_max_chars,
        no_refine: cfg.ablation.no_refine,
    };
    let stopped = |ck: &Checkpoints, stage: Stage| -> Option<RunOutcome> {
        (opts.stop_after == Some(stage)).then(|| RunOutcome {
            output_dir: out_dir.clone(),
            dataset: None,
            manifest: None,
            pairs: 0,
            shortfall: 0,
            ledger: ck.ledger(),
            session_ledger: gateway.ledger(),
            resumed_from: ck.resumed_from,
            stopped_after: Some(stage),
            gateway_stats: gateway.stats(),
        })
    };

    let sampled: SampledArtifact = ck.run(Stage::Sampled, |_| {
        let (corpora, load_stats) = load_corpora(
            &cfg.corpora.iter().map(|(d, s)| (d.clone(), s.path.clone())).collect(),
            &cfg.load_options(),
        )?;
        let docs = sample_by_mix(&corpora, &cfg.domain_mix()?, cfg.sample_size(), cfg.sample_seed())?;
        Ok(SampledArtifact { docs, load_stats })
    })?;
    if let Some(o) = stopped(&ck, Stage::Sampled) {
        return Ok(o);
    }

    let personas: PersonaArtifact = ck.run(Stage::Personas, |ck| {
        if cfg.ablation.no_persona {
            return Ok(PersonaArtifact {
                personas: BTreeMap::new(),
                omitted: Vec::new(),
            });
        }
        let results: Vec<(String, Option<Persona>)> = pool
            .install(|| {
                sampled
                    .docs
                    .par_iter()
                    .map(|doc| {
                        synth
                            .generate_persona(doc, planner.task_seed(&doc.id))
                            .map(|p| (doc.id.clone(), p))
                    })
                    .collect::<Result<_, GatewayError>>()
            })
            .map_err(|e| ck.stage_error(Stage::Personas, e))?;
        let mut art = PersonaArtifact {
            personas: BTreeMap::new(),
            omitted: Vec::new(),
        };
        for (id, p) in results {
            match p {
                Some(p) => {
                    art.personas.insert(id, p);
                }
                None => art.omitted.push(id),
            }
        }
        Ok(art)
    })?;
    if let Some(o) = stopped(&ck, Stage::Personas) {
        return Ok(o);
    }

    let instructions: InstructionArtifact = ck.run(Stage::Instructions, |ck| {
        let tasks: Vec<SynthesisTask> = sampled
            .docs
            .iter()
            .map(|d| planner.plan(d.clone(), personas.personas.get(&d.id).cloned()))
            .collect();
        let results = pool.install(|| {
            tasks
                .par_iter()
                .map(|t| match synth.draft_instruction(t) {
                    Ok(d) => Ok(Ok(d)),
                    Err(TaskError::Dropped { stage, reason }) => Ok(Err(DropRecord {
                        doc_id: t.doc.id.clone(),
                        stage,
                        reason: format!("{reason:?}"),
                    })),
                    Err(TaskError::Fatal(e)) => Err(e),
                })
                .collect::<Result<Vec<_>, GatewayError>>()
        });
        let results = results.map_err(|e| ck.stage_error(Stage::Instructions, e))?;
        let (drafts, drops) = split(results);
        Ok(InstructionArtifact { drafts, drops })
    })?;
    if let Some(o) = stopped(&ck, Stage::Instructions) {
        return Ok(o);
    }

    let deduped: DedupArtifact = ck.run(Stage::Deduped, |_| {
        let (mut kept, dropped) = if cfg.ablation.no_minhash {
            (instructions.drafts.clone(), Vec::new())
        } else {
            let outcome = dedup(instructions.drafts.clone(), &cfg.dedup.params()?)?;
            let dropped = outcome
                .dropped
                .into_iter()
                .map(|d| DedupDrop {
                    dropped_id: d.record.dedup_key().to_string(),
                    kept_id: d.duplicate_of,
                    estimated_jaccard: d.estimated_jaccard,
                })
                .collect();
            (outcome.kept, dropped)
        };
        kept.sort_by(|a, b| a.record.doc_id.cmp(&b.record.doc_id));
        let truncated = if kept.len() > cfg.target_pairs {
            kept.split_off(cfg.target_pairs)
                .into_iter()
                .map(|d| d.record.doc_id)
                .collect()
        } else {
            Vec::new()
        };
        Ok(DedupArtifact {
            kept,
            dropped,
            truncated,
        })
    })?;
    if let Some(o) = stopped(&ck, Stage::Deduped) {
        return Ok(o);
    }

    let responses: ResponseArtifact = ck.run(Stage::Responses, |ck| {
        let results = pool.install(|| {
            deduped
                .kept
                .par_iter()
                .map(|d| match synth.respond(d) {
                    Ok(p) => Ok(Ok(p)),
                    Err(TaskError::Dropped { stage, reason }) => Ok(Err(DropRecord {
                        doc_id: d.record.doc_id.clone(),
                        stage,
                        reason: format!("{reason:?}"),
                    })),
                    Err(TaskError::Fatal(e)) => Err(e),
                })
                .collect::<Result<Vec<_>, GatewayError>>()
        });
        let results = results.map_err(|e| ck.stage_error(Stage::Responses, e))?;
        let (pairs, drops) = split(results);
        Ok(ResponseArtifact { pairs, drops })
    })?;
    if let Some(o) = stopped(&ck, Stage::Responses) {
        return Ok(o);
    }

    // Final: dataset, sidecars and reports. Always rewritten so the files on
    // disk match this config even when the dataset itself was restored.
    let dataset_path = out_dir.join(DATASET_FILE);
    let pairs = responses.pairs;
    let shortfall = cfg.target_pairs.saturating_sub(pairs.len());
    if shortfall > 0 {
        log::warn!(
            "shortfall: {} pairs produced, {} targeted ({} short)",
            pairs.len(),
            cfg.target_pairs,
            shortfall
        );
    }

    let mut drops: Vec<DropRecord> = personas
        .omitted
        .iter()
        .map(|id| DropRecord {
            doc_id: id.clone(),
            stage: cost_stage::PERSONA.into(),
            reason: "persona_omitted".into(),
        })
        .collect();
    drops.extend(instructions.drops.iter().cloned());
    drops.extend(deduped.dropped.iter().map(|d| DropRecord {
        doc_id: d.dropped_id.clone(),
        stage: "dedup".into(),
        reason: format!("near_duplicate_of:{}", d.kept_id),
    }));
    drops.extend(deduped.truncated.iter().map(|id| DropRecord {
        doc_id: id.clone(),
        stage: "truncate".into(),
        reason: "surplus".into(),
    }));
    drops.extend(responses.drops.iter().cloned());
    write_jsonl(&out_dir.join(DROPS_FILE), &drops)?;
    write_jsonl(&out_dir.join(DEDUP_REPORT_FILE), &deduped.dropped)?;

    let bytes = dataset::serialize(&pairs, &dataset_path)?;

    if !pairs.is_empty() {
        let stats = token_report(cfg, &pairs, gateway.counter().as_ref())?;
        write_json(&out_dir.join(TOKENS_FILE), &stats)?;
    }
    if cfg.analysis.diversity && pairs.len() >= 2 {
        let report = diversity_report(cfg, &pairs)?;
        write_json(&out_dir.join(DIVERSITY_FILE), &report)?;
    }
    if cfg.analysis.judge && !pairs.is_empty() {
        let template = cfg.judge_template()?;
        let report = pool
            .install(|| judge_report(gateway, &template, &plan, &pairs, cfg.run_seed))
            .map_err(|e| ck.stage_error(Stage::Final, e))?;
        write_json(&out_dir.join(JUDGE_FILE), &report)?;
    }

    let ledger = ck.ledger();
    let budget = BudgetReport::from_ledger(&ledger, cfg.prices()?);
    write_json(&out_dir.join(BUDGET_FILE), &budget)?;
    write_atomic(&out_dir.join(BUDGET_TABLE_FILE), budget.to_string().as_bytes())?;

    let manifest = Manifest {
        config_digest: ck.digests[&Stage::Final].clone(),
        run_seed: cfg.run_seed,
        target_pairs: cfg.target_pairs,
        oversample_factor: cfg.oversample_factor,
        oversample_note: OVERSAMPLE_NOTE.into(),
        sampled: sampled.docs.len(),
        instructions_kept: deduped.kept.len(),
        pairs: pairs.len(),
        shortfall,
        ablation: cfg.ablation,
        counts: Counts::of(&pairs),
        drops: DropStats {
            persona_omitted: personas.omitted.len(),
            instruction_stage: instructions.drops.len(),
            dedup: deduped.dropped.len(),
            truncated: deduped.truncated.len(),
            response_stage: responses.drops.len(),
        },
        ledger: ledger.clone(),
    };
    write_json(&Manifest::path_for(&dataset_path), &manifest)?;
    let digest = ck.digests[&Stage::Final].clone();
    ck.store.commit(Stage::Final, &dataset_path, &bytes, &digest, &ledger)?;

    Ok(RunOutcome {
        output_dir: out_dir,
        dataset: Some(dataset_path),
        manifest: Some(manifest),
        pairs: pairs.len(),
        shortfall,
        ledger,
        session_ledger: gateway.ledger(),
        resumed_from: ck.resumed_from,
        stopped_after: None,
        gateway_stats: gateway.stats(),
    })
}

fn split<T>(results: Vec<Result<T, DropRecord>>) -> (Vec<T>, Vec<DropRecord>) {
    let mut ok = Vec::new();
    let mut dropped = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(d) => dropped.push(d),
        }
    }
    (ok, dropped)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(CheckpointError::from)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    let mut bytes = Vec::new();
    for item in items {
        serde_json::to_writer(&mut bytes, item).map_err(CheckpointError::from)?;
        bytes.push(b'\n');
    }
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn token_report(
    cfg: &RunConfig,
    pairs: &[InstructionResponsePair],
    counter: &dyn webr_core::complete::TokenCounter,
) -> Result<TokenStats, PipelineError> {
    analysis::token_stats(
        pairs.iter().map(|p| (p.instruction.as_str(), p.response.as_str())),
        counter,
        cfg.analysis.token_bin_width,
    )
    .map_err(|e| PipelineError::Analysis(e.to_string()))
}

pub fn embedder(cfg: &RunConfig) -> Result<Box<dyn Embedder>, PipelineError> {
    let a = &cfg.analysis;
    Ok(match a.embedder {
        EmbedderKind::Hashing => Box::new(HashingEmbedder {
            dim: a.hashing_dim,
            seed: seed::derive(cfg.run_seed, "embed"),
        }),
        EmbedderKind::File => {
            let path = a
                .embeddings_path
                .as_ref()
                .ok_or_else(|| ConfigError::Invalid("analysis.embeddings_path is required for the file embedder".into()))?;
            Box::new(FileEmbeddings::load(path)?)
        }
        EmbedderKind::Http => {
            let url = a.embed_url.clone().unwrap_or_else(|| cfg.backend.base_url.clone());
            Box::new(HttpEmbedder::new(
                &url,
                &a.embed_model,
                std::env::var(&cfg.backend.api_key_env).ok(),
                Duration::from_secs(cfg.backend.timeout_secs),
            ))
        }
    })
}

/// Seeded sample of up to `analysis.diversity_n` instructions, embedded and
/// scored.
pub fn diversity_report(cfg: &RunConfig, pairs: &[InstructionResponsePair]) -> Result<DiversityReport, PipelineError> {
    let n = cfg.analysis.diversity_n.min(pairs.len());
    let idx = analysis::sample_indices(pairs.len(), n, seed::derive(cfg.run_seed, "diversity"))
        .map_err(|e| PipelineError::Analysis(e.to_string()))?;
    let items: Vec<(String, String)> = idx
        .into_iter()
        .map(|i| (pairs[i].id.clone(), pairs[i].instruction.clone()))
        .collect();
    let vectors = embedder(cfg)?.embed(&items)?;
    analysis::diversity(&vectors).map_err(|e| PipelineError::Analysis(e.to_string()))
}

/// Judges every instruction. Call from inside a pool to bound concurrency.
pub fn judge_report(
    gateway: &Gateway,
    template: &Template,
    plan: &GenerationPlan,
    pairs: &[InstructionResponsePair],
    run_seed: u64,
) -> Result<JudgeReport, GatewayError> {
    let params = plan.for_stage(cost_stage::JUDGE);
    let raws: Vec<String> = pairs
        .par_iter()
        .map(|p| analysis::judge_one(gateway, template, params, &p.id, &p.instruction, run_seed))
        .collect::<Result<_, _>>()?;
    let mut report = JudgeReport::default();
    for (p, raw) in pairs.iter().zip(raws) {
        report.push(&p.id, raw);
    }
    Ok(report)
}
