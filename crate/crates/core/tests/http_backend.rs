use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use mcs_sql::llm::{Gateway, GatewayError, HttpBackend, LlmBackend, LlmRequest, ResponseCache, RetryPolicy};
use serde_json::{json, Value};

/// Serves the scripted (status, body) replies in order, one per
/// connection, and records the request bodies and paths it saw.
type Seen = Arc<Mutex<Vec<(String, Value, Option<String>)>>>;

struct MockServer {
    url: String,
    seen: Seen,
}

fn serve(replies: Vec<(u16, Value)>) -> MockServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let path = request_line.split_whitespace().nth(1).unwrap_or_default().to_string();
            let (mut length, mut auth) = (0usize, None);
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push((path, serde_json::from_slice(&buf).unwrap(), auth));
            let text = body.to_string();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            )
            .unwrap();
        }
    });
    MockServer { url, seen }
}

fn quick_retry() -> RetryPolicy {
    RetryPolicy {
        attempts: 3,
        base_delay: Duration::from_millis(5),
    }
}

#[test]
fn completions_are_ordered_by_choice_index() {
    let server = serve(vec![(
        200,
        json!({"choices": [
            {"index": 1, "message": {"content": "second"}},
            {"index": 0, "message": {"content": "first"}}
        ]}),
    )]);
    let backend = HttpBackend::new(&server.url, "sk-test", quick_retry());
    let request = LlmRequest::new("hello", "generate").samples(2, 0.8);
    let texts = backend.complete(&request, "gpt-4").unwrap();
    assert_eq!(texts, ["first", "second"]);
    let seen = server.seen.lock().unwrap();
    let (path, body, auth) = &seen[0];
    assert_eq!(path, "/v1/chat/completions");
    assert_eq!(body["model"], "gpt-4");
    assert_eq!(body["n"], 2);
    assert_eq!(body["messages"][0]["content"], "hello");
    assert_eq!(auth.as_deref(), Some("Bearer sk-test"));
}

#[test]
fn transient_failures_are_retried() {
    let server = serve(vec![
        (503, json!({"error": "busy"})),
        (429, json!({"error": "slow down"})),
        (200, json!({"choices": [{"message": {"content": "ok"}}]})),
    ]);
    let backend = HttpBackend::new(&server.url, "", quick_retry());
    let texts = backend.complete(&LlmRequest::new("p", "mask"), "m").unwrap();
    assert_eq!(texts, ["ok"]);
    assert_eq!(server.seen.lock().unwrap().len(), 3);
}

#[test]
fn retries_are_bounded() {
    let server = serve(vec![(500, json!({})), (500, json!({})), (500, json!({}))]);
    let backend = HttpBackend::new(&server.url, "", quick_retry());
    let err = backend.complete(&LlmRequest::new("p", "mask"), "m").unwrap_err();
    assert!(matches!(err, GatewayError::Transport { attempts: 3, .. }), "{err:?}");
}

#[test]
fn auth_errors_are_not_retried() {
    let server = serve(vec![(401, json!({"error": "bad key"})), (200, json!({"choices": []}))]);
    let backend = HttpBackend::new(&server.url, "wrong", quick_retry());
    let err = backend.complete(&LlmRequest::new("p", "mask"), "m").unwrap_err();
    assert!(matches!(err, GatewayError::Auth(_)), "{err:?}");
    assert_eq!(server.seen.lock().unwrap().len(), 1);
}

#[test]
fn embeddings_follow_item_index() {
    let server = serve(vec![(
        200,
        json!({"data": [
            {"index": 1, "embedding": [0.0, 1.0]},
            {"index": 0, "embedding": [1.0, 0.0]}
        ]}),
    )]);
    let backend = HttpBackend::new(&server.url, "", quick_retry());
    let vecs = backend.embed(&["a".into(), "b".into()], "emb").unwrap();
    assert_eq!(vecs, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert_eq!(server.seen.lock().unwrap()[0].0, "/v1/embeddings");
}

#[test]
fn gateway_caches_http_answers() {
    let server = serve(vec![(200, json!({"choices": [{"message": {"content": "{\"sql\": \"SELECT 1\"}"}}]}))]);
    let backend = HttpBackend::new(&server.url, "", quick_retry());
    let gateway = Gateway::new(Box::new(backend), ResponseCache::in_memory(), "chat", "emb", 2);
    let request = LlmRequest::new("same prompt", "generate");
    let first = gateway.complete(&request).unwrap();
    let second = gateway.complete(&request).unwrap();
    assert_eq!(first, second);
    assert_eq!(first[0].raw_text, "{\"sql\": \"SELECT 1\"}");
    assert_eq!(gateway.backend_calls(), 1);
    assert_eq!(server.seen.lock().unwrap().len(), 1);
}
