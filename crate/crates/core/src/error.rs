use alloc::string::String;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("gold label {0:?} is not in the task label set")]
    GoldOutsideLabels(String),
}

/// Failure of a single chat-completion call.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    /// Transport errors or retryable statuses persisted through every attempt.
    #[error("backend unreachable after {attempts} attempt(s): {reason}")]
    BackendUnreachable { attempts: u32, reason: String },
    /// Non-retryable 4xx response.
    #[error("backend rejected the request (HTTP {status}): {body}")]
    BackendRejected { status: u16, body: String },
    #[error("backend returned an empty completion")]
    EmptyCompletion,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// The first failing request of a batch, by input position.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("request {index} of the batch failed: {source}")]
pub struct BatchError {
    pub index: usize,
    pub source: GatewayError,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    /// The epoch sink asked the run to stop after persisting an epoch.
    #[error("run halted after epoch {0}")]
    Halted(u32),
    #[error("epoch sink failed: {0}")]
    Sink(String),
}

impl EngineError {
    /// True when the failure originated in the language-model backend.
    pub fn is_backend(&self) -> bool {
        matches!(self, Self::Gateway(_) | Self::Batch(_))
    }
}
