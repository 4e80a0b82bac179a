use std::time::Duration;

use distill_core::{BackendConfig, GatewayError, LlmRequest};
use serde_json::{json, Value};

use super::{Backend, BackendReply};

/// `POST {base_url}/chat/completions` against an OpenAI-compatible server.
pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
    retry_limit: u32,
    backoff: Duration,
}

enum Failure {
    Retryable(String),
    Fatal(GatewayError),
}

impl HttpBackend {
    /// Reads the API key from the environment variable named in
    /// `config.api_key_env`; a missing key sends no Authorization header.
    pub fn from_config(config: &BackendConfig) -> Result<Self, String> {
        let base = config
            .base_url
            .as_deref()
            .ok_or("backend.base_url is required for http_openai_compatible")?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            url: format!("{}/chat/completions", base.trim_end_matches('/')),
            api_key: std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty()),
            retry_limit: config.retry_limit,
            backoff: Duration::from_millis(config.retry_backoff_ms),
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn body(request: &LlmRequest) -> Value {
        let mut messages = Vec::new();
        if let Some(system) = &request.system {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": request.user}));
        let mut body = json!({
            "model": request.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<String, Failure> {
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(classify)?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Failure::Retryable(format!("reading response body: {e}")))?;
        match status {
            200..=299 => extract_content(&text).map_err(|reason| {
                Failure::Fatal(GatewayError::BackendRejected {
                    status,
                    body: reason,
                })
            }),
            429 | 500..=599 => Err(Failure::Retryable(format!("HTTP {status}: {}", clip(&text)))),
            _ => Err(Failure::Fatal(GatewayError::BackendRejected {
                status,
                body: clip(&text),
            })),
        }
    }
}

fn classify(e: ureq::Error) -> Failure {
    use ureq::Error as E;
    match e {
        E::BadUri(_) | E::Http(_) | E::InvalidProxyUrl | E::RequireHttpsOnly(_) | E::TlsRequired => {
            Failure::Fatal(GatewayError::BackendUnreachable {
                attempts: 1,
                reason: e.to_string(),
            })
        }
        other => Failure::Retryable(other.to_string()),
    }
}

fn clip(s: &str) -> String {
    const MAX: usize = 512;
    match s.char_indices().nth(MAX) {
        Some((i, _)) => format!("{}…", &s[..i]),
        None => s.to_string(),
    }
}

/// `choices[0].message.content`; a null content reads as empty.
fn extract_content(body: &str) -> Result<String, String> {
    let v: Value = serde_json::from_str(body).map_err(|e| format!("response is not JSON: {e}"))?;
    let message = v
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .ok_or_else(|| format!("response has no choices[0].message: {}", clip(body)))?;
    match message.get("content") {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Null) | None => Ok(String::new()),
        Some(other) => Err(format!("message content is not a string: {other}")),
    }
}

impl Backend for HttpBackend {
    fn call(&self, request: &LlmRequest) -> Result<BackendReply, GatewayError> {
        let body = Self::body(request);
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body) {
                Ok(text) => return Ok(BackendReply { text, attempts }),
                Err(Failure::Fatal(GatewayError::BackendUnreachable { reason, .. })) => {
                    return Err(GatewayError::BackendUnreachable { attempts, reason })
                }
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(reason)) => {
                    if attempts > self.retry_limit {
                        return Err(GatewayError::BackendUnreachable { attempts, reason });
                    }
                    let factor = 1u32 << (attempts - 1).min(10);
                    std::thread::sleep(self.backoff * factor);
                }
            }
        }
    }
}
