//! Backend-agnostic completion interface.

use alloc::string::String;

use crate::cost::{Completion, GenerationParams};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("backend returned an empty completion")]
    EmptyCompletion,
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("prompt needs ~{estimated} tokens plus {max_output} output tokens, context limit is {limit}")]
    ContextLimit {
        estimated: u64,
        max_output: u64,
        limit: u64,
    },
    #[error("backend failed after {attempts} attempt(s): {message}")]
    Backend { message: String, attempts: u32 },
}

impl GatewayError {
    /// Errors scoped to a single task; the run can continue without it.
    pub fn is_task_local(&self) -> bool {
        matches!(self, Self::EmptyCompletion | Self::ContextLimit { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub prompt: String,
    pub params: GenerationParams,
    pub stage: String,
    pub seed: u64,
}

/// Something that turns prompts into completions.
///
/// Implementations must be safe to call from several workers at once.
pub trait Complete {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, GatewayError>;
}

impl<T: Complete + ?Sized> Complete for &T {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, GatewayError> {
        (**self).complete(request)
    }
}

pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> u64;
}

/// `ceil(bytes / 4)`, the usual rule of thumb for BPE vocabularies.
#[derive(Debug, Clone, Copy, Default)]
pub struct ApproxTokenCounter;

impl TokenCounter for ApproxTokenCounter {
    fn count(&self, text: &str) -> u64 {
        (text.len() as u64).div_ceil(4)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn approx_counter_rounds_up() {
        let c = ApproxTokenCounter;
        assert_eq!(c.count(""), 0);
        assert_eq!(c.count("abcd"), 1);
        assert_eq!(c.count("abcde"), 2);
    }
}
