//! Chat-completion backends behind one [`LanguageModel`] front: validation,
//! the on-disk response cache, and bounded parallel batches.

mod cache;
mod http;
mod mock;

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use distill_core::{
    BackendConfig, BackendKind, BatchError, GatewayError, LanguageModel, LlmRequest, LlmResponse,
};

pub use cache::{CacheEntry, ResponseCache};
pub use http::HttpBackend;
pub use mock::{MockStats, ScriptedMock, NO_RULE_SENTINEL};

/// What a backend produced for one request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendReply {
    pub text: String,
    /// Attempts spent, including the successful one.
    pub attempts: u32,
}

/// A raw completion source. Retries, if any, happen inside `call`.
pub trait Backend: Send + Sync {
    fn call(&self, request: &LlmRequest) -> Result<BackendReply, GatewayError>;
}

/// Builds the backend described by `config`.
pub fn build_backend(config: &BackendConfig) -> Result<Arc<dyn Backend>, String> {
    Ok(match config.kind {
        BackendKind::HttpOpenAiCompatible => Arc::new(HttpBackend::from_config(config)?),
        BackendKind::ScriptedMock => Arc::new(ScriptedMock::new(&config.mock)?),
    })
}

/// The [`LanguageModel`] used by runs: cache lookups first, then the backend.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    cache: Option<ResponseCache>,
    max_in_flight: usize,
    backend_calls: AtomicU64,
    cache_write_failed: AtomicBool,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            cache: None,
            max_in_flight: 1,
            backend_calls: AtomicU64::new(0),
            cache_write_failed: AtomicBool::new(false),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Upper bound on concurrently outstanding requests in a batch (min 1).
    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    /// Requests that reached the backend (cache misses).
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::Relaxed)
    }

    /// Runs every request with at most `max_in_flight` outstanding. With
    /// `stop_on_error`, no request is dispatched once one has failed;
    /// requests already running still finish.
    fn fan_out(&self, requests: &[LlmRequest], stop_on_error: bool) -> Vec<Option<Result<LlmResponse, GatewayError>>> {
        let workers = self.max_in_flight.min(requests.len());
        if workers <= 1 {
            let mut out = Vec::with_capacity(requests.len());
            for r in requests {
                let res = self.complete(r);
                let failed = res.is_err();
                out.push(Some(res));
                if failed && stop_on_error {
                    break;
                }
            }
            out.resize_with(requests.len(), || None);
            return out;
        }
        let slots: Mutex<Vec<Option<Result<LlmResponse, GatewayError>>>> =
            Mutex::new((0..requests.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let failed = AtomicBool::new(false);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    if stop_on_error && failed.load(Ordering::SeqCst) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= requests.len() {
                        break;
                    }
                    let res = self.complete(&requests[i]);
                    if res.is_err() {
                        failed.store(true, Ordering::SeqCst);
                    }
                    slots.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(res);
                });
            }
        });
        slots.into_inner().unwrap_or_else(|p| p.into_inner())
    }
}

impl LanguageModel for Gateway {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, GatewayError> {
        request.validate()?;
        let key = request.cache_key();
        if let Some(text) = self.cache.as_ref().and_then(|c| c.get(&key, request)) {
            return Ok(LlmResponse {
                text,
                from_cache: true,
                latency_ms: 0,
                attempt_count: 1,
            });
        }
        let started = Instant::now();
        self.backend_calls.fetch_add(1, Ordering::Relaxed);
        let reply = self.backend.call(request)?;
        if reply.text.trim().is_empty() {
            return Err(GatewayError::EmptyCompletion);
        }
        if let Some(cache) = &self.cache {
            if let Err(e) = cache.put(&key, request, &reply.text) {
                if !self.cache_write_failed.swap(true, Ordering::Relaxed) {
                    eprintln!("warning: cannot write response cache: {e}");
                }
            }
        }
        Ok(LlmResponse {
            text: reply.text,
            from_cache: false,
            latency_ms: started.elapsed().as_millis() as u64,
            attempt_count: reply.attempts,
        })
    }

    fn complete_batch(&self, requests: &[LlmRequest]) -> Result<Vec<LlmResponse>, BatchError> {
        let results = self.fan_out(requests, true);
        // Requests are dispatched in index order, so every index below the
        // first observed failure has completed and the lowest failing index
        // is always found.
        if let Some((index, source)) = results.iter().enumerate().find_map(|(i, r)| match r {
            Some(Err(e)) => Some((i, e.clone())),
            _ => None,
        }) {
            return Err(BatchError { index, source });
        }
        Ok(results.into_iter().map(|r| r.expect("no failure, so every slot is filled").unwrap()).collect())
    }

    fn complete_each(&self, requests: &[LlmRequest]) -> Vec<Result<LlmResponse, GatewayError>> {
        self.fan_out(requests, false)
            .into_iter()
            .map(|r| r.expect("every request runs"))
            .collect()
    }
}
