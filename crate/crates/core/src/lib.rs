//! Core of the web reconstruction pipeline: turns raw web documents into
//! instruction-response pairs by treating each document either as part of
//! an instruction (rewrite) or as the basis of a response (backtranslation
//! with rollout and refinement).
//!
//! The crate is `no_std` and only needs `alloc`. It holds the algorithms and
//! data types; file formats, HTTP, threading and the CLI live in the `webr`
//! crate. Everything that talks to a model goes through [`complete::Complete`].

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod analysis;
pub mod complete;
pub mod corpus;
pub mod cost;
pub mod dedup;
pub mod mock;
pub mod seed;
pub mod synthesis;
pub mod template;

pub use complete::{ApproxTokenCounter, Complete, CompletionRequest, GatewayError, TokenCounter};
pub use corpus::{sample_by_mix, DomainMix, WebDocument};
pub use cost::{Completion, CostLedger, GenerationParams, GenerationPlan, Prices};
pub use dedup::{dedup, DedupParams, MinHashSignature};
pub use synthesis::{
    Ablations, Branch, BranchRatio, InstructionRecord, InstructionResponsePair, Persona, Scope,
    SynthesisTask, Synthesizer,
};
