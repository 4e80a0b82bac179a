use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use distill_core::{GatewayError, LlmRequest, Matcher, MatchTarget, MockScript, Purpose};
use regex::Regex;

use super::{Backend, BackendReply};

/// Returned when no rule matches.
pub const NO_RULE_SENTINEL: &str = "MOCK-NO-RULE";

enum Compiled {
    Contains(String),
    StartsWith(String),
    Exact(String),
    Regex(Regex),
}

impl Compiled {
    fn matches(&self, text: &str) -> bool {
        match self {
            Self::Contains(s) => text.contains(s.as_str()),
            Self::StartsWith(s) => text.starts_with(s.as_str()),
            Self::Exact(s) => text == s,
            Self::Regex(r) => r.is_match(text),
        }
    }
}

struct Rule {
    matcher: Compiled,
    target: MatchTarget,
    responses: Vec<String>,
}

/// Counters recorded by a [`ScriptedMock`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MockStats {
    pub calls: u64,
    pub meta_calls: u64,
    pub task_calls: u64,
    pub peak_in_flight: usize,
}

/// Deterministic rule-driven backend for tests and dry runs.
pub struct ScriptedMock {
    rules: Vec<Rule>,
    latency: Duration,
    hits: Mutex<Vec<usize>>,
    log: Mutex<Vec<LlmRequest>>,
    meta_calls: AtomicU64,
    task_calls: AtomicU64,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

impl ScriptedMock {
    pub fn new(script: &MockScript) -> Result<Self, String> {
        let rules = script
            .rules
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let matcher = match &r.matcher {
                    Matcher::Contains(s) => Compiled::Contains(s.clone()),
                    Matcher::StartsWith(s) => Compiled::StartsWith(s.clone()),
                    Matcher::Exact(s) => Compiled::Exact(s.clone()),
                    Matcher::Regex(p) => Compiled::Regex(
                        Regex::new(p).map_err(|e| format!("mock rule {}: invalid regex: {e}", i + 1))?,
                    ),
                };
                if r.responses.is_empty() {
                    return Err(format!("mock rule {} has no responses", i + 1));
                }
                Ok(Rule {
                    matcher,
                    target: r.target,
                    responses: r.responses.clone(),
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        let n = rules.len();
        Ok(Self {
            rules,
            latency: Duration::from_millis(script.latency_ms),
            hits: Mutex::new(vec![0; n]),
            log: Mutex::new(Vec::new()),
            meta_calls: AtomicU64::new(0),
            task_calls: AtomicU64::new(0),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        })
    }

    pub fn stats(&self) -> MockStats {
        let meta_calls = self.meta_calls.load(Ordering::SeqCst);
        let task_calls = self.task_calls.load(Ordering::SeqCst);
        MockStats {
            calls: meta_calls + task_calls,
            meta_calls,
            task_calls,
            peak_in_flight: self.peak.load(Ordering::SeqCst),
        }
    }

    /// Every request received, in arrival order.
    pub fn requests(&self) -> Vec<LlmRequest> {
        self.log.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    fn respond(&self, request: &LlmRequest) -> String {
        let system = request.system.as_deref().unwrap_or("");
        let both = format!("{system}\n{}", request.user);
        let found = self.rules.iter().position(|r| {
            let text = match r.target {
                MatchTarget::User => request.user.as_str(),
                MatchTarget::System => system,
                MatchTarget::Both => both.as_str(),
            };
            r.matcher.matches(text)
        });
        let Some(i) = found else {
            return NO_RULE_SENTINEL.to_string();
        };
        let k = {
            let mut hits = self.hits.lock().unwrap_or_else(|p| p.into_inner());
            let k = hits[i];
            hits[i] += 1;
            k
        };
        let responses = &self.rules[i].responses;
        let template = &responses[k.min(responses.len() - 1)];
        template.replace("{h}", &request.cache_key()[..8])
    }
}

impl Backend for ScriptedMock {
    fn call(&self, request: &LlmRequest) -> Result<BackendReply, GatewayError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        match request.purpose {
            Purpose::MetaGeneration => self.meta_calls.fetch_add(1, Ordering::SeqCst),
            Purpose::TaskPrediction => self.task_calls.fetch_add(1, Ordering::SeqCst),
        };
        self.log.lock().unwrap_or_else(|p| p.into_inner()).push(request.clone());
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        let text = self.respond(request);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        Ok(BackendReply { text, attempts: 1 })
    }
}
