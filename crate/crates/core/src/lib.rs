//! Allocation-only core of the distill prompt optimizer.
//!
//! The crate holds everything that does not touch the filesystem, the
//! network or threads: the domain model and its validation, the metrics,
//! answer extraction and candidate selection, seeded sampling, and the
//! five-stage search loop. The loop is written against [`LanguageModel`], so
//! any backend (HTTP, scripted, in-test closures) can drive it.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod engine;
pub mod error;
pub mod evaluator;
pub mod llm;
pub mod metrics;
pub mod model;
pub mod sampling;

pub use engine::{DistillEngine, EpochSink, MetaPromptSet, OptimizationResult};
pub use error::{BatchError, EngineError, GatewayError, MetricError};
pub use evaluator::{EvalOutcome, PromptMode, ScoredCandidate};
pub use llm::{CallStats, LanguageModel, LlmRequest, LlmResponse, Purpose};
pub use model::{
    validate_config, BackendConfig, BackendKind, CandidateId, Dataset, EpochRecord, EvalSubsetSize,
    Example, Matcher, MatchTarget, MetricKind, MockRule, MockScript, PromptCandidate, RunConfig,
    Stage, TaskKind, TaskSpec,
};
