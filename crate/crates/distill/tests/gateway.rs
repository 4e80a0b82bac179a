mod common;

use std::sync::Arc;
use std::time::Instant;

use common::{chat_body, StubServer};
use distill::gateway::{Backend, BackendReply, Gateway, HttpBackend, ResponseCache, ScriptedMock};
use distill_core::{BackendConfig, GatewayError, LanguageModel, LlmRequest, Matcher, MockRule, MockScript, Purpose};

fn req(user: &str) -> LlmRequest {
    LlmRequest {
        system: Some("You are terse.".into()),
        user: user.into(),
        temperature: 0.0,
        max_tokens: 32,
        seed: Some(11),
        model: "stub-model".into(),
        purpose: Purpose::TaskPrediction,
    }
}

fn http(url: &str, retry_limit: u32) -> HttpBackend {
    let cfg = BackendConfig {
        retry_limit,
        retry_backoff_ms: 1,
        timeout_ms: 2_000,
        api_key_env: "DISTILL_TEST_KEY_UNSET".into(),
        ..BackendConfig::http(url, "stub-model")
    };
    HttpBackend::from_config(&cfg).unwrap()
}

#[test]
fn retries_transient_failures_then_succeeds() {
    let server = StubServer::start(vec![
        (500, "{}".into()),
        (500, "{}".into()),
        (200, chat_body("ok")),
    ]);
    let gw = Gateway::new(Arc::new(http(&server.url, 3)));
    let r = gw.complete(&req("hello")).unwrap();
    assert_eq!(r.text, "ok");
    assert_eq!(r.attempt_count, 3);
    assert!(!r.from_cache);
    assert_eq!(server.hits(), 3);

    let seen = server.seen.lock().unwrap();
    let body = &seen[0].body;
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "hello");
    assert_eq!(body["seed"], 11);
    assert!(seen[0].headers.iter().all(|(n, _)| n != "authorization"));
}

#[test]
fn rate_limit_is_retried() {
    let server = StubServer::start(vec![(429, "slow down".into()), (200, chat_body("fine"))]);
    let r = http(&server.url, 2).call(&req("x")).unwrap();
    assert_eq!(r, BackendReply { text: "fine".into(), attempts: 2 });
}

#[test]
fn retry_bound_is_respected() {
    let server = StubServer::start(vec![(503, "busy".into())]);
    match http(&server.url, 2).call(&req("x")) {
        Err(GatewayError::BackendUnreachable { attempts, reason }) => {
            assert_eq!(attempts, 3);
            assert!(reason.contains("503"));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(server.hits(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let server = StubServer::start(vec![(400, "{\"error\":\"bad model\"}".into())]);
    match http(&server.url, 5).call(&req("x")) {
        Err(GatewayError::BackendRejected { status, body }) => {
            assert_eq!(status, 400);
            assert!(body.contains("bad model"));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(server.hits(), 1);
}

#[test]
fn empty_content_is_an_error() {
    let server = StubServer::start(vec![(200, chat_body("   "))]);
    let gw = Gateway::new(Arc::new(http(&server.url, 0)));
    assert_eq!(gw.complete(&req("x")), Err(GatewayError::EmptyCompletion));
}

#[test]
fn unreachable_endpoint() {
    // Bind then drop to get a port with nothing listening.
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let backend = http(&format!("http://127.0.0.1:{port}/v1"), 1);
    match backend.call(&req("x")) {
        Err(GatewayError::BackendUnreachable { attempts, .. }) => assert_eq!(attempts, 2),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn api_key_comes_from_the_named_variable() {
    let server = StubServer::start(vec![(200, chat_body("ok"))]);
    std::env::set_var("DISTILL_TEST_KEY_SET", "sk-test");
    let cfg = BackendConfig {
        api_key_env: "DISTILL_TEST_KEY_SET".into(),
        ..BackendConfig::http(&server.url, "m")
    };
    HttpBackend::from_config(&cfg).unwrap().call(&req("x")).unwrap();
    let seen = server.seen.lock().unwrap();
    let auth = seen[0].headers.iter().find(|(n, _)| n == "authorization").unwrap();
    assert_eq!(auth.1, "Bearer sk-test");
}

fn mock(rules: Vec<MockRule>, latency_ms: u64) -> Arc<ScriptedMock> {
    Arc::new(ScriptedMock::new(&MockScript { rules, latency_ms }).unwrap())
}

#[test]
fn cache_serves_repeats_without_backend_traffic() {
    let tmp = tempfile::tempdir().unwrap();
    let m = mock(vec![MockRule::new(Matcher::Contains("Paraphrase".into()), "Variant A")], 0);
    let gw = Gateway::new(m.clone()).with_cache(ResponseCache::open(tmp.path()).unwrap());
    let first = gw.complete(&req("Paraphrase: X")).unwrap();
    let second = gw.complete(&req("Paraphrase: X")).unwrap();
    assert_eq!((first.text.as_str(), first.from_cache), ("Variant A", false));
    assert_eq!((second.text.as_str(), second.from_cache), ("Variant A", true));
    assert_eq!(m.stats().calls, 1);
    assert_eq!(gw.backend_calls(), 1);

    // A purpose change keeps the key; a temperature change does not.
    let other_purpose = LlmRequest {
        purpose: Purpose::MetaGeneration,
        ..req("Paraphrase: X")
    };
    assert!(gw.complete(&other_purpose).unwrap().from_cache);
    let warmer = LlmRequest {
        temperature: 0.7,
        ..req("Paraphrase: X")
    };
    assert!(!gw.complete(&warmer).unwrap().from_cache);

    let entry: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(tmp.path().join(format!("{}.json", req("Paraphrase: X").cache_key()))).unwrap(),
    )
    .unwrap();
    assert_eq!(entry["response_text"], "Variant A");
    assert_eq!(entry["request"]["user"], "Paraphrase: X");
    assert!(entry["created_at"].as_str().unwrap().ends_with('Z'));
    assert!(entry["request"].get("purpose").is_none());
}

#[test]
fn purged_cache_reproduces_texts() {
    let run = |dir: &std::path::Path| -> Vec<String> {
        let m = mock(vec![MockRule::new(Matcher::Contains("q".into()), "A-{h}")], 0);
        let gw = Gateway::new(m).with_cache(ResponseCache::open(dir).unwrap());
        (0..5).map(|i| gw.complete(&req(&format!("q{i}"))).unwrap().text).collect()
    };
    let tmp = tempfile::tempdir().unwrap();
    let a = run(tmp.path());
    std::fs::remove_dir_all(tmp.path()).unwrap();
    assert_eq!(run(tmp.path()), a);
}

#[test]
fn corrupt_cache_entry_is_a_miss() {
    let tmp = tempfile::tempdir().unwrap();
    let m = mock(vec![MockRule::new(Matcher::Contains("q".into()), "fresh")], 0);
    let r = req("q");
    std::fs::write(tmp.path().join(format!("{}.json", r.cache_key())), "{not json").unwrap();
    let gw = Gateway::new(m.clone()).with_cache(ResponseCache::open(tmp.path()).unwrap());
    assert_eq!(gw.complete(&r).unwrap().text, "fresh");
    assert_eq!(m.stats().calls, 1);
    assert!(gw.complete(&r).unwrap().from_cache);
}

#[test]
fn invalid_requests_never_reach_the_backend() {
    let m = mock(vec![], 0);
    let gw = Gateway::new(m.clone());
    assert!(matches!(gw.complete(&req("")), Err(GatewayError::InvalidRequest(_))));
    let hot = LlmRequest {
        temperature: 2.5,
        ..req("x")
    };
    assert!(matches!(gw.complete(&hot), Err(GatewayError::InvalidRequest(_))));
    assert_eq!(m.stats().calls, 0);
}

#[test]
fn batch_preserves_order_and_bounds_concurrency() {
    let m = mock(vec![MockRule::new(Matcher::Contains("item".into()), "echo {h}")], 20);
    let gw = Gateway::new(m.clone()).with_max_in_flight(3);
    let requests: Vec<LlmRequest> = (0..10).map(|i| req(&format!("item {i}"))).collect();
    let started = Instant::now();
    let out = gw.complete_batch(&requests).unwrap();
    let elapsed = started.elapsed();
    assert_eq!(out.len(), 10);
    for (r, response) in requests.iter().zip(&out) {
        assert_eq!(response.text, format!("echo {}", &r.cache_key()[..8]));
    }
    let stats = m.stats();
    assert!(stats.peak_in_flight <= 3, "peak {}", stats.peak_in_flight);
    assert!(stats.peak_in_flight >= 2, "expected real parallelism");
    // ceil(10 / 3) waves of 20 ms each
    assert!(elapsed.as_millis() >= 80);
    assert!(gw.complete_batch(&[]).unwrap().is_empty());
}

/// Backend with per-request failure rules and jittered latency.
struct Flaky;

impl Backend for Flaky {
    fn call(&self, request: &LlmRequest) -> Result<BackendReply, GatewayError> {
        let n: u64 = request.user.trim_start_matches("item ").parse().unwrap();
        std::thread::sleep(std::time::Duration::from_millis((n * 7) % 5));
        if n == 4 || n == 7 {
            return Err(GatewayError::BackendRejected {
                status: 400,
                body: format!("no {n}"),
            });
        }
        Ok(BackendReply {
            text: request.user.clone(),
            attempts: 1,
        })
    }
}

#[test]
fn batch_failure_reports_lowest_failing_index() {
    for workers in [1, 2, 3, 8] {
        let gw = Gateway::new(Arc::new(Flaky)).with_max_in_flight(workers);
        let requests: Vec<LlmRequest> = (0..10).map(|i| req(&format!("item {i}"))).collect();
        let err = gw.complete_batch(&requests).unwrap_err();
        assert_eq!(err.index, 4, "with {workers} workers");
        assert!(matches!(err.source, GatewayError::BackendRejected { status: 400, .. }));

        let each = gw.complete_each(&requests);
        assert_eq!(each.len(), 10);
        for (i, r) in each.iter().enumerate() {
            assert_eq!(r.is_err(), i == 4 || i == 7);
            if let Ok(resp) = r {
                assert_eq!(resp.text, format!("item {i}"));
            }
        }
    }
}
