//! Chat-completion request/response types and the backend trait the engine
//! is written against.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{BatchError, GatewayError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    MetaGeneration,
    TaskPrediction,
}

/// One single-turn chat-completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub system: Option<String>,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    pub model: String,
    /// Telemetry only; not part of the cache key.
    pub purpose: Purpose,
}

/// The request fields that determine a completion. Stored verbatim in cache entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalRequest {
    pub model: String,
    pub system: Option<String>,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl LlmRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.user.is_empty() {
            return Err(GatewayError::InvalidRequest("user message is empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(alloc::format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn canonical(&self) -> CanonicalRequest {
        CanonicalRequest {
            model: self.model.clone(),
            system: self.system.clone(),
            user: self.user.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            seed: self.seed,
        }
    }

    /// SHA-256 (hex) over a length-prefixed encoding of the canonical fields.
    pub fn cache_key(&self) -> String {
        let mut h = Sha256::new();
        let mut field = |tag: u8, bytes: &[u8]| {
            h.update([tag]);
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        };
        field(b'm', self.model.as_bytes());
        match &self.system {
            Some(s) => field(b's', s.as_bytes()),
            None => field(b'S', &[]),
        }
        field(b'u', self.user.as_bytes());
        // +0.0 folds -0.0 into 0.0
        field(b't', &(self.temperature + 0.0).to_bits().to_le_bytes());
        field(b'k', &self.max_tokens.to_le_bytes());
        match self.seed {
            Some(s) => field(b'r', &s.to_le_bytes()),
            None => field(b'R', &[]),
        }
        hex::encode(h.finalize())
    }
}

/// Free-function form of [`LlmRequest::cache_key`].
pub fn cache_key(request: &LlmRequest) -> String {
    request.cache_key()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub from_cache: bool,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

/// A chat-completion backend.
///
/// The default batch methods run sequentially; implementations with real
/// parallelism override them while keeping output aligned with input.
pub trait LanguageModel {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, GatewayError>;

    /// Fail-fast batch: the first failure (lowest index among failures
    /// observed) is returned and no further requests are dispatched.
    fn complete_batch(&self, requests: &[LlmRequest]) -> Result<Vec<LlmResponse>, BatchError> {
        requests
            .iter()
            .enumerate()
            .map(|(index, r)| self.complete(r).map_err(|source| BatchError { index, source }))
            .collect()
    }

    /// Runs every request and reports each outcome separately.
    fn complete_each(&self, requests: &[LlmRequest]) -> Vec<Result<LlmResponse, GatewayError>> {
        requests.iter().map(|r| self.complete(r)).collect()
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, GatewayError> {
        (**self).complete(request)
    }

    fn complete_batch(&self, requests: &[LlmRequest]) -> Result<Vec<LlmResponse>, BatchError> {
        (**self).complete_batch(requests)
    }

    fn complete_each(&self, requests: &[LlmRequest]) -> Vec<Result<LlmResponse, GatewayError>> {
        (**self).complete_each(requests)
    }
}

/// Request counters accumulated by the engine and evaluator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallStats {
    pub meta_calls: u64,
    pub task_calls: u64,
    pub cache_hits: u64,
    pub fallback_reasks: u64,
}

impl CallStats {
    pub fn total(&self) -> u64 {
        self.meta_calls + self.task_calls
    }

    pub fn absorb(&mut self, other: CallStats) {
        self.meta_calls += other.meta_calls;
        self.task_calls += other.task_calls;
        self.cache_hits += other.cache_hits;
        self.fallback_reasks += other.fallback_reasks;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req() -> LlmRequest {
        LlmRequest {
            system: Some("sys".into()),
            user: "Paraphrase: X".into(),
            temperature: 0.7,
            max_tokens: 1024,
            seed: Some(9),
            model: "m".into(),
            purpose: Purpose::MetaGeneration,
        }
    }

    #[test]
    fn identical_requests_share_a_key() {
        assert_eq!(req().cache_key(), req().cache_key());
        assert_eq!(req().cache_key().len(), 64);
    }

    #[test]
    fn temperature_is_part_of_the_key() {
        let cold = LlmRequest {
            temperature: 0.0,
            ..req()
        };
        assert_ne!(req().cache_key(), cold.cache_key());
    }

    #[test]
    fn purpose_is_not_part_of_the_key() {
        let p = LlmRequest {
            purpose: Purpose::TaskPrediction,
            ..req()
        };
        assert_eq!(req().cache_key(), cache_key(&p));
    }

    #[test]
    fn absent_system_differs_from_empty_system() {
        let none = LlmRequest { system: None, ..req() };
        let empty = LlmRequest {
            system: Some(String::new()),
            ..req()
        };
        assert_ne!(none.cache_key(), empty.cache_key());
    }

    #[test]
    fn field_boundaries_do_not_alias() {
        let a = LlmRequest {
            system: Some("ab".into()),
            user: "c".into(),
            ..req()
        };
        let b = LlmRequest {
            system: Some("a".into()),
            user: "bc".into(),
            ..req()
        };
        assert_ne!(a.cache_key(), b.cache_key());
    }

    #[test]
    fn validation() {
        assert!(req().validate().is_ok());
        assert!(LlmRequest { user: String::new(), ..req() }.validate().is_err());
        assert!(LlmRequest { temperature: 2.5, ..req() }.validate().is_err());
    }
}
