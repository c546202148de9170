//! Persona generation, branch/scope assignment and the two reconstruction
//! branches.
//!
//! Web as Instruction (WaI): the document plus a generated rewrite request
//! forms the instruction; the model's rewrite is the response.
//!
//! Web as Response (WaR): a latent instruction is inferred from the
//! document, answered without the document (rollout), and the draft is then
//! refined against the document.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::complete::{Complete, CompletionRequest, GatewayError, TokenCounter};
use crate::corpus::WebDocument;
use crate::cost::{stage, Completion, GenerationPlan};
use crate::seed;
use crate::template::{extract_tagged, tag, TemplateSet};

/// Default cap on persona length, in characters.
pub const DEFAULT_PERSONA_MAX_CHARS: usize = 1000;

/// Joins the document and the rewrite request in a WaI instruction.
pub const WAI_SEPARATOR: &str = "\n\n";

/// Attempts per structured step: the original call plus one resample.
const ATTEMPTS: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    WebAsInstruction,
    WebAsResponse,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::WebAsInstruction => "web_as_instruction",
            Branch::WebAsResponse => "web_as_response",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Whole,
    Part,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Whole => "whole",
            Scope::Part => "part",
        }
    }

    pub fn hint(self) -> &'static str {
        match self {
            Scope::Whole => "the whole web content",
            Scope::Part => "a specific part of the web content",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    #[serde(default)]
    pub no_persona: bool,
    #[serde(default)]
    pub no_part: bool,
    #[serde(default)]
    pub no_refine: bool,
    #[serde(default)]
    pub no_minhash: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("branch ratio weights must be non-negative and not both zero, got ({wai}, {war})")]
    Ratio { wai: f64, war: f64 },
    #[error("p_part must be in [0, 1], got {0}")]
    PartProbability(f64),
}

/// Relative weights of the two branches; 2:1 in the published setup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchRatio {
    pub wai: f64,
    pub war: f64,
}

impl BranchRatio {
    pub fn new(wai: f64, war: f64) -> Result<Self, ConfigError> {
        let ok = wai.is_finite() && war.is_finite() && wai >= 0.0 && war >= 0.0 && wai + war > 0.0;
        if !ok {
            return Err(ConfigError::Ratio { wai, war });
        }
        Ok(Self { wai, war })
    }

    pub fn p_wai(&self) -> f64 {
        self.wai / (self.wai + self.war)
    }
}

impl Default for BranchRatio {
    fn default() -> Self {
        Self { wai: 2.0, war: 1.0 }
    }
}

pub fn check_p_part(p: f64) -> Result<f64, ConfigError> {
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(ConfigError::PartProbability(p))
    }
}

/// Bernoulli draw with `P(WebAsInstruction) = wai / (wai + war)`.
pub fn assign_branch(task_seed: u64, ratio: BranchRatio) -> Branch {
    let u = seed::unit_f64(seed::derive(task_seed, "branch"));
    if u < ratio.p_wai() {
        Branch::WebAsInstruction
    } else {
        Branch::WebAsResponse
    }
}

/// Bernoulli draw with `P(Part) = p_part`; always `Whole` when Part scope is
/// ablated.
pub fn assign_scope(task_seed: u64, p_part: f64, no_part: bool) -> Scope {
    if no_part {
        return Scope::Whole;
    }
    let u = seed::unit_f64(seed::derive(task_seed, "scope"));
    if u < p_part {
        Scope::Part
    } else {
        Scope::Whole
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub doc_id: String,
    pub description: String,
}

/// A document with everything needed to reconstruct it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisTask {
    pub doc: WebDocument,
    pub persona: Option<Persona>,
    pub branch: Branch,
    pub scope: Scope,
    pub task_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskPlanner {
    pub run_seed: u64,
    pub ratio: BranchRatio,
    pub p_part: f64,
    pub no_part: bool,
}

impl TaskPlanner {
    pub fn task_seed(&self, doc_id: &str) -> u64 {
        seed::task_seed(self.run_seed, doc_id)
    }

    pub fn plan(&self, doc: WebDocument, persona: Option<Persona>) -> SynthesisTask {
        let task_seed = self.task_seed(&doc.id);
        SynthesisTask {
            branch: assign_branch(task_seed, self.ratio),
            scope: assign_scope(task_seed, self.p_part, self.no_part),
            doc,
            persona,
            task_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub instruction: String,
    pub doc_id: String,
    pub branch: Branch,
    pub scope: Scope,
    pub persona_used: bool,
}

/// Output of the instruction phase; the response phase completes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftInstruction {
    pub task: SynthesisTask,
    pub record: InstructionRecord,
    /// The rewrite request (WaI) or latent instruction (WaR).
    pub generated: String,
}

impl crate::dedup::Dedupable for DraftInstruction {
    fn dedup_key(&self) -> &str {
        &self.record.doc_id
    }

    fn dedup_text(&self) -> &str {
        &self.record.instruction
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairExtra {
    pub domain: String,
    pub persona_used: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewrite_request: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_instruction: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draft_response: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairMetadata {
    pub doc_id: String,
    pub branch: Branch,
    pub scope: Scope,
    pub model: String,
    pub instruction_tokens: u64,
    pub response_tokens: u64,
    pub extra: PairExtra,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionResponsePair {
    pub id: String,
    pub instruction: String,
    pub response: String,
    pub metadata: PairMetadata,
}

impl InstructionResponsePair {
    /// Invariant violations, empty when the pair is well formed.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.instruction.trim().is_empty() {
            v.push("empty instruction".to_string());
        }
        if self.response.trim().is_empty() {
            v.push("empty response".to_string());
        }
        let x = &self.metadata.extra;
        match self.metadata.branch {
            Branch::WebAsInstruction => {
                match &x.rewrite_request {
                    None => v.push("web_as_instruction pair without rewrite_request".to_string()),
                    Some(r) if !self.instruction.ends_with(r.as_str()) => {
                        v.push("instruction does not end with the rewrite request".to_string())
                    }
                    Some(_) => {}
                }
                if x.latent_instruction.is_some() || x.draft_response.is_some() {
                    v.push("web_as_instruction pair carries web_as_response metadata".to_string());
                }
            }
            Branch::WebAsResponse => {
                if x.draft_response.is_none() {
                    v.push("web_as_response pair without draft_response".to_string());
                }
                match &x.latent_instruction {
                    None => v.push("web_as_response pair without latent_instruction".to_string()),
                    Some(l) if *l != self.instruction => {
                        v.push("latent_instruction differs from instruction".to_string())
                    }
                    Some(_) => {}
                }
                if x.rewrite_request.is_some() {
                    v.push("web_as_response pair carries rewrite_request".to_string());
                }
            }
        }
        v
    }
}

/// Why a task produced no pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    EmptyCompletion,
    Unparseable,
    ContextLimit,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TaskError {
    #[error("task dropped at stage {stage}: {reason:?}")]
    Dropped { stage: String, reason: DropReason },
    #[error(transparent)]
    Fatal(#[from] GatewayError),
}

/// Runs the synthesis steps against a backend.
pub struct Synthesizer<'a, C: ?Sized> {
    pub backend: &'a C,
    pub templates: &'a TemplateSet,
    pub plan: &'a GenerationPlan,
    pub counter: &'a dyn TokenCounter,
    pub persona_max_chars: usize,
    pub no_refine: bool,
}

fn call_seed(task_seed: u64, stage_name: &str, attempt: u64) -> u64 {
    seed::mix64(seed::derive(task_seed, stage_name) ^ attempt)
}

impl<'a, C: Complete + ?Sized> Synthesizer<'a, C> {
    fn request(&self, stage_name: &str, prompt: String, seed: u64) -> CompletionRequest {
        CompletionRequest {
            prompt,
            params: self.plan.for_stage(stage_name).clone(),
            stage: stage_name.to_string(),
            seed,
        }
    }

    /// One step with the resample-then-drop policy. `parse` turns raw text
    /// into the step's value; `None` counts as unparseable.
    fn step<F>(
        &self,
        stage_name: &str,
        prompt: &str,
        task_seed: u64,
        parse: F,
    ) -> Result<(String, Completion), TaskError>
    where
        F: Fn(&str) -> Option<String>,
    {
        let mut last = DropReason::EmptyCompletion;
        for attempt in 0..ATTEMPTS {
            let req = self.request(stage_name, prompt.to_string(), call_seed(task_seed, stage_name, attempt));
            match self.backend.complete(&req) {
                Ok(c) => match parse(&c.text) {
                    Some(v) => return Ok((v, c)),
                    None => last = DropReason::Unparseable,
                },
                Err(GatewayError::EmptyCompletion) => last = DropReason::EmptyCompletion,
                Err(GatewayError::ContextLimit { .. }) => {
                    return Err(TaskError::Dropped {
                        stage: stage_name.to_string(),
                        reason: DropReason::ContextLimit,
                    })
                }
                Err(e) => return Err(TaskError::Fatal(e)),
            }
        }
        Err(TaskError::Dropped {
            stage: stage_name.to_string(),
            reason: last,
        })
    }

    fn free_text(text: &str) -> Option<String> {
        let t = text.trim();
        (!t.is_empty()).then(|| t.to_string())
    }

    /// Generates the author persona of `doc`. `Ok(None)` means the persona
    /// was omitted after a failed resample; the task continues without one.
    pub fn generate_persona(
        &self,
        doc: &WebDocument,
        task_seed: u64,
    ) -> Result<Option<Persona>, GatewayError> {
        let prompt = self
            .templates
            .persona
            .render(&[("document", Some(&doc.text))]);
        let cap = self.persona_max_chars;
        let parse = |text: &str| {
            extract_tagged(text, tag::PERSONA)
                .filter(|p| p.chars().count() <= cap)
                .map(str::to_string)
        };
        match self.step(stage::PERSONA, &prompt, task_seed, parse) {
            Ok((description, _)) => Ok(Some(Persona {
                doc_id: doc.id.clone(),
                description,
            })),
            Err(TaskError::Dropped { .. }) => Ok(None),
            Err(TaskError::Fatal(e)) => Err(e),
        }
    }

    fn instruction_prompt(&self, task: &SynthesisTask) -> String {
        let t = match (task.branch, task.scope) {
            (Branch::WebAsInstruction, Scope::Whole) => &self.templates.wai_whole,
            (Branch::WebAsInstruction, Scope::Part) => &self.templates.wai_part,
            (Branch::WebAsResponse, Scope::Whole) => &self.templates.war_whole,
            (Branch::WebAsResponse, Scope::Part) => &self.templates.war_part,
        };
        t.render(&[
            ("document", Some(&task.doc.text)),
            ("persona", task.persona.as_ref().map(|p| p.description.as_str())),
            ("scope_hint", Some(task.scope.hint())),
        ])
    }

    /// Instruction phase: WaI steps 1–2 or WaR step 1.
    pub fn draft_instruction(&self, task: &SynthesisTask) -> Result<DraftInstruction, TaskError> {
        let prompt = self.instruction_prompt(task);
        let (stage_name, answer_tag) = match task.branch {
            Branch::WebAsInstruction => (stage::WAI_INSTRUCTION, tag::REQUEST),
            Branch::WebAsResponse => (stage::WAR_INSTRUCTION, tag::INSTRUCTION),
        };
        let (generated, _) = self.step(stage_name, &prompt, task.task_seed, |t| {
            extract_tagged(t, answer_tag).map(str::to_string)
        })?;
        let instruction = match task.branch {
            Branch::WebAsInstruction => compose_wai_instruction(&task.doc.text, &generated),
            Branch::WebAsResponse => generated.clone(),
        };
        Ok(DraftInstruction {
            record: InstructionRecord {
                instruction,
                doc_id: task.doc.id.clone(),
                branch: task.branch,
                scope: task.scope,
                persona_used: task.persona.is_some(),
            },
            task: task.clone(),
            generated,
        })
    }

    /// Prompt for the WaR rollout: the latent instruction alone.
    pub fn rollout_prompt(latent_instruction: &str) -> String {
        latent_instruction.to_string()
    }

    fn refine_prompt(&self, draft: &DraftInstruction, rollout: &str) -> String {
        self.templates.refine.render(&[
            ("document", Some(&draft.task.doc.text)),
            ("instruction", Some(&draft.generated)),
            ("draft", Some(rollout)),
            ("scope_hint", Some(draft.task.scope.hint())),
        ])
    }

    /// Response phase: WaI step 3 or WaR steps 2–3.
    pub fn respond(&self, draft: &DraftInstruction) -> Result<InstructionResponsePair, TaskError> {
        let task = &draft.task;
        let seed = task.task_seed;
        let (response, final_stage, extra) = match task.branch {
            Branch::WebAsInstruction => {
                let (response, _) = self.step(
                    stage::WAI_RESPONSE,
                    &draft.record.instruction,
                    seed,
                    Self::free_text,
                )?;
                let extra = PairExtra {
                    domain: task.doc.domain.clone(),
                    persona_used: draft.record.persona_used,
                    rewrite_request: Some(draft.generated.clone()),
                    latent_instruction: None,
                    draft_response: None,
                };
                (response, stage::WAI_RESPONSE, extra)
            }
            Branch::WebAsResponse => {
                let (rollout, _) = self.step(
                    stage::WAR_ROLLOUT,
                    &Self::rollout_prompt(&draft.generated),
                    seed,
                    Self::free_text,
                )?;
                let (response, final_stage) = if self.no_refine {
                    (rollout.clone(), stage::WAR_ROLLOUT)
                } else {
                    let prompt = self.refine_prompt(draft, &rollout);
                    let (refined, _) = self.step(stage::WAR_REFINE, &prompt, seed, Self::free_text)?;
                    (refined, stage::WAR_REFINE)
                };
                let extra = PairExtra {
                    domain: task.doc.domain.clone(),
                    persona_used: draft.record.persona_used,
                    rewrite_request: None,
                    latent_instruction: Some(draft.generated.clone()),
                    draft_response: Some(rollout),
                };
                (response, final_stage, extra)
            }
        };
        let instruction = draft.record.instruction.clone();
        Ok(InstructionResponsePair {
            id: task.doc.id.clone(),
            metadata: PairMetadata {
                doc_id: task.doc.id.clone(),
                branch: task.branch,
                scope: task.scope,
                model: self.plan.for_stage(final_stage).model.clone(),
                instruction_tokens: self.counter.count(&instruction),
                response_tokens: self.counter.count(&response),
                extra,
            },
            instruction,
            response,
        })
    }

    pub fn synthesize_wai(&self, task: &SynthesisTask) -> Result<InstructionResponsePair, TaskError> {
        debug_assert_eq!(task.branch, Branch::WebAsInstruction);
        self.respond(&self.draft_instruction(task)?)
    }

    pub fn synthesize_war(&self, task: &SynthesisTask) -> Result<InstructionResponsePair, TaskError> {
        debug_assert_eq!(task.branch, Branch::WebAsResponse);
        self.respond(&self.draft_instruction(task)?)
    }

    pub fn synthesize(&self, task: &SynthesisTask) -> Result<InstructionResponsePair, TaskError> {
        self.respond(&self.draft_instruction(task)?)
    }
}

pub fn compose_wai_instruction(document: &str, rewrite_request: &str) -> String {
    let mut s = String::with_capacity(document.len() + WAI_SEPARATOR.len() + rewrite_request.len());
    s.push_str(document);
    s.push_str(WAI_SEPARATOR);
    s.push_str(rewrite_request);
    s
}
