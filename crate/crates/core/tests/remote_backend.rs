use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use weathertgd::backend::{
    Backend, BackendError, CompletionProvider, CompletionRequest, ProviderKind, Purpose, RemoteProvider,
    RequestDefaults, ResponseCache, RetryPolicy,
};

#[derive(Default)]
struct Seen {
    auth: Vec<String>,
    bodies: Vec<serde_json::Value>,
}

/// Serves the canned `(status, body)` replies in order, one per connection.
fn mock(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Seen>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Seen::default()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    log.lock().unwrap().auth.push(line[14..].trim().to_string());
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().bodies.push(serde_json::from_slice(&buf).unwrap());
            let reply = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

fn ok(text: &str) -> (u16, String) {
    let body = serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 11, "completion_tokens": 3},
    });
    (200, body.to_string())
}

fn provider(url: &str) -> RemoteProvider {
    let retry = RetryPolicy {
        max_retries: 3,
        base_delay: Duration::from_millis(1),
        factor: 2.0,
    };
    RemoteProvider::new(url, "test-key", Duration::from_secs(5), retry).unwrap()
}

fn request() -> CompletionRequest {
    CompletionRequest {
        model: "m1".into(),
        system_prompt: "You write weather captions.".into(),
        user_prompt: "Station A, 24 hours of data.".into(),
        temperature: 0.2,
        max_tokens: 64,
        purpose: Purpose::Seed,
        iteration: 0,
    }
}

#[test]
fn transient_failures_are_retried() {
    let (url, seen) = mock(vec![
        (503, "busy".into()),
        (429, "slow down".into()),
        ok("Mild and dry."),
    ]);
    let p = provider(&url);
    let r = p.complete(&request()).unwrap();
    assert_eq!(r.text, "Mild and dry.");
    assert_eq!((r.prompt_tokens, r.completion_tokens), (11, 3));
    assert_eq!(r.provider, ProviderKind::Remote);
    assert_eq!(p.attempts(), 3);

    let seen = seen.lock().unwrap();
    assert!(seen.auth.iter().all(|a| a == "Bearer test-key"));
    let body = &seen.bodies[0];
    assert_eq!(body["model"], "m1");
    assert_eq!(body["max_tokens"], 64);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "Station A, 24 hours of data.");
    assert!(body.get("purpose").is_none());
}

#[test]
fn auth_failure_is_not_retried() {
    let (url, _) = mock(vec![(401, "bad key".into())]);
    let p = provider(&url);
    assert!(matches!(p.complete(&request()), Err(BackendError::Auth(_))));
    assert_eq!(p.attempts(), 1);
}

#[test]
fn retries_run_out() {
    let (url, _) = mock(vec![
        (500, "a".into()),
        (502, "b".into()),
        (503, "c".into()),
        (504, "d".into()),
    ]);
    let p = provider(&url);
    match p.complete(&request()) {
        Err(BackendError::ExhaustedRetries { attempts, last }) => {
            assert_eq!(attempts, 4);
            assert!(matches!(*last, BackendError::Provider { status: Some(504), .. }));
        }
        other => panic!("expected exhausted retries, got {other:?}"),
    }
}

#[test]
fn malformed_and_rejected_responses() {
    let (url, _) = mock(vec![(200, "{\"choices\": []}".into()), (400, "no".into())]);
    let p = provider(&url);
    assert!(matches!(p.complete(&request()), Err(BackendError::Decode(_))));
    assert!(matches!(
        p.complete(&request()),
        Err(BackendError::Rejected { status: 400, .. })
    ));
}

#[test]
fn cache_serves_repeat_requests() {
    let (url, seen) = mock(vec![ok("Cool, light wind."), ok("Different answer.")]);
    let dir = tempfile::tempdir().unwrap();
    let remote: Arc<dyn CompletionProvider> = Arc::new(provider(&url));
    let backend =
        Backend::new(remote, RequestDefaults::default()).with_cache(Some(ResponseCache::new(dir.path()).unwrap()));

    let first = backend.complete(&request()).unwrap();
    let second = backend.complete(&request()).unwrap();
    assert_eq!(first.text, second.text);
    assert_eq!(second.provider, ProviderKind::Cache);
    assert_eq!(seen.lock().unwrap().bodies.len(), 1);

    let mut warmer = request();
    warmer.temperature = 0.7;
    assert_eq!(backend.complete(&warmer).unwrap().text, "Different answer.");
    assert_eq!(backend.take_calls().len(), 3);
}
