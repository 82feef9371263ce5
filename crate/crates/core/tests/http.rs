//! HTTP clients (completions, tokenizer, consistency scorer) against a local stub server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use groundconv::backend::{Backend, BackendConfig, DecodingParams, HttpBackend};
use groundconv::dataset::{HttpTokenCounter, TokenCounter};
use groundconv::eval::{ConsistencyScorer, HttpConsistencyScorer};
use groundconv::{BackendError, DatasetError};
use std::time::Duration;

#[derive(Debug, Clone)]
struct Seen {
    headers: Vec<String>,
    body: Vec<u8>,
}

/// Serves the canned `(status, body)` responses in order, one per connection.
fn stub(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                headers.push(line);
            }
            let mut buf = vec![0u8; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen { headers, body: buf });
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

fn ok_body(text: &str) -> String {
    serde_json::json!({"choices": [{"text": text}], "usage": {"prompt_tokens": 3, "completion_tokens": 1}}).to_string()
}

fn backend(url: &str, retries: u32) -> HttpBackend {
    let mut cfg = BackendConfig::new("stub", url, "m");
    cfg.retries = retries;
    cfg.backoff_ms = 1;
    cfg.timeout_secs = 5.0;
    HttpBackend::new(cfg).unwrap()
}

#[test]
fn rate_limits_are_retried_until_success() {
    let (url, seen) = stub(vec![
        (429, "{}".into()),
        (429, "{}".into()),
        (200, ok_body("fine")),
    ]);
    let b = backend(&url, 3);
    let r = b.complete("hello", &DecodingParams::greedy(8)).unwrap();
    assert_eq!(r.text, "fine");
    assert_eq!(r.usage.unwrap().completion_tokens, Some(1));
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn retries_are_bounded() {
    let (url, seen) = stub(vec![(503, "busy".into()), (503, "busy".into())]);
    let err = backend(&url, 1).complete("hello", &DecodingParams::greedy(8)).unwrap_err();
    assert!(matches!(err, BackendError::HttpStatus { code: 503, .. }));
    assert_eq!(seen.lock().unwrap().len(), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = stub(vec![(400, "bad".into())]);
    let err = backend(&url, 3).complete("hello", &DecodingParams::greedy(8)).unwrap_err();
    assert!(matches!(err, BackendError::HttpStatus { code: 400, .. }));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn identical_greedy_requests_send_identical_bytes() {
    let (url, seen) = stub(vec![(200, ok_body("a")), (200, ok_body("a"))]);
    let b = backend(&url, 0);
    let dec = DecodingParams::greedy(16).with_stops(["\n"]);
    b.complete("Document: x\nUser:", &dec).unwrap();
    b.complete("Document: x\nUser:", &dec).unwrap();
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].body, seen[1].body);
    let v: serde_json::Value = serde_json::from_slice(&seen[0].body).unwrap();
    assert_eq!(v["temperature"], 0.0);
    assert_eq!(v["prompt"], "Document: x\nUser:");
}

#[test]
fn stops_are_applied_to_the_response() {
    let (url, _) = stub(vec![(200, ok_body("ans\nUser: next"))]);
    let dec = DecodingParams::greedy(16).with_stops(["\nUser:"]);
    assert_eq!(backend(&url, 0).complete("p", &dec).unwrap().text, "ans");
}

#[test]
fn malformed_responses_are_reported() {
    let (url, _) = stub(vec![(200, "{\"nope\": 1}".into())]);
    let err = backend(&url, 0).complete("p", &DecodingParams::greedy(4)).unwrap_err();
    assert!(matches!(err, BackendError::MalformedResponse(_)));
}

#[test]
fn bearer_token_comes_from_the_named_variable() {
    let (url, seen) = stub(vec![(200, ok_body("x"))]);
    std::env::set_var("GROUNDCONV_TEST_TOKEN", "s3cret");
    let mut cfg = BackendConfig::new("stub", &url, "m");
    cfg.auth_env = Some("GROUNDCONV_TEST_TOKEN".into());
    HttpBackend::new(cfg).unwrap().complete("p", &DecodingParams::greedy(4)).unwrap();
    let headers = &seen.lock().unwrap()[0].headers;
    assert!(headers.iter().any(|h| h.eq_ignore_ascii_case("authorization: Bearer s3cret")));
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = backend(&format!("http://127.0.0.1:{port}/v1/completions"), 0)
        .complete("p", &DecodingParams::greedy(4))
        .unwrap_err();
    assert!(err.is_transient(), "{err:?}");
}

#[test]
fn tokenizer_counts_are_passed_through() {
    let (url, seen) = stub(vec![
        (200, r#"{"count": 17}"#.into()),
        (200, r#"{"input_ids": [1, 2, 3]}"#.into()),
    ]);
    let t = HttpTokenCounter::new(&url, Duration::from_secs(5)).unwrap();
    assert_eq!(t.count("a known sentence").unwrap(), 17);
    assert_eq!(t.count("x").unwrap(), 3);
    assert!(t.is_exact());
    let body: serde_json::Value = serde_json::from_slice(&seen.lock().unwrap()[0].body).unwrap();
    assert_eq!(body["text"], "a known sentence");
}

#[test]
fn tokenizer_failure_is_unavailable() {
    let (url, _) = stub(vec![(500, "{}".into())]);
    let t = HttpTokenCounter::new(&url, Duration::from_secs(5)).unwrap();
    assert!(matches!(t.count("x"), Err(DatasetError::TokenizerUnavailable(_))));
}

#[test]
fn consistency_scorer_round_trip() {
    let (url, seen) = stub(vec![(200, r#"{"score": 0.25}"#.into())]);
    let s = HttpConsistencyScorer::new(&url, Duration::from_secs(5)).unwrap();
    assert_eq!(s.score("doc", "claim").unwrap(), 0.25);
    let body: serde_json::Value = serde_json::from_slice(&seen.lock().unwrap()[0].body).unwrap();
    assert_eq!((body["document"].as_str(), body["claim"].as_str()), (Some("doc"), Some("claim")));
}
