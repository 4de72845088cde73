mod common;

use std::time::Duration;

use common::{completion_body, MockServer};
use lexcheck::llm::{Backend, BackendConfig, BackendKind, ChatMessage, LlmError, RetryPolicy};

fn config(url: &str) -> BackendConfig {
    BackendConfig {
        kind: BackendKind::Http,
        endpoint: Some(url.to_string()),
        model_name: "gpt-3.5-turbo-0125".into(),
        retry: RetryPolicy {
            max_attempts: 3,
            base_backoff: Duration::from_millis(1),
        },
        api_key_env: "LEXCHECK_TEST_UNSET_KEY".into(),
        request_timeout: Duration::from_secs(10),
        ..BackendConfig::default()
    }
}

fn messages() -> Vec<ChatMessage> {
    vec![ChatMessage::system("rules"), ChatMessage::user("Text:\nThe processor shall assist.")]
}

#[test]
fn rate_limited_twice_then_ok() {
    let server = MockServer::start(vec![
        (429, "{\"error\":\"slow down\"}".into()),
        (429, "{\"error\":\"slow down\"}".into()),
        (200, completion_body("R5. Assistance duty.", 120, 7)),
    ]);
    let backend = Backend::http(config(&server.url)).unwrap();
    let out = backend.complete(&messages()).unwrap();
    assert_eq!(out.text, "R5. Assistance duty.");
    assert_eq!(out.usage.attempts, 3);
    assert_eq!((out.usage.prompt_tokens, out.usage.completion_tokens), (120, 7));

    let requests = server.join();
    assert_eq!(requests.len(), 3);
    let body: serde_json::Value = serde_json::from_str(&requests[0]).unwrap();
    assert_eq!(body["model"], "gpt-3.5-turbo-0125");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "Text:\nThe processor shall assist.");
}

#[test]
fn validation_errors_are_not_retried() {
    let server = MockServer::start(vec![(400, "{\"error\":\"bad request\"}".into())]);
    let backend = Backend::http(config(&server.url)).unwrap();
    match backend.complete(&messages()) {
        Err(LlmError::Backend {
            attempts, last_status, ..
        }) => assert_eq!((attempts, last_status), (1, Some(400))),
        other => panic!("expected a backend error, got {other:?}"),
    }
    assert_eq!(server.join().len(), 1);
}

#[test]
fn server_errors_exhaust_the_retry_budget() {
    let server = MockServer::start(vec![(503, "{}".into()), (502, "{}".into()), (500, "{}".into())]);
    let backend = Backend::http(config(&server.url)).unwrap();
    match backend.complete(&messages()) {
        Err(LlmError::Backend {
            attempts, last_status, ..
        }) => assert_eq!((attempts, last_status), (3, Some(500))),
        other => panic!("expected a backend error, got {other:?}"),
    }
    server.join();
}

#[test]
fn missing_usage_is_estimated() {
    let body = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": "R99"}}]}).to_string();
    let server = MockServer::start(vec![(200, body)]);
    let backend = Backend::http(config(&server.url)).unwrap();
    let out = backend.complete(&messages()).unwrap();
    // "rules" -> 2 tokens, the user message (33 chars) -> 9, "R99" -> 1
    assert_eq!((out.usage.prompt_tokens, out.usage.completion_tokens), (11, 1));
    server.join();
}

#[test]
fn malformed_success_body_fails_without_retry() {
    let server = MockServer::start(vec![(200, "not json".into())]);
    let backend = Backend::http(config(&server.url)).unwrap();
    assert!(matches!(
        backend.complete(&messages()),
        Err(LlmError::Backend { attempts: 1, .. })
    ));
    server.join();
}
