//! Std side of the pipeline: corpus files, the LLM gateway, configuration,
//! checkpoints, dataset files and the staged runner.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod embed;
pub mod gateway;
pub mod pipeline;

pub use checkpoint::Stage;
pub use config::RunConfig;
pub use pipeline::{run, run_with_gateway, PipelineError, RunOptions, RunOutcome};
