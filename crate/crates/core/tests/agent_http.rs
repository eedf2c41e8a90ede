//! HTTP backends against a throwaway local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use needforge::agent::{
    case_studies, case_study_taxonomy, run_pipeline, BackendError, ChatBackend, ChatMessage, HttpChatBackend, HttpEmbedder,
    RetryPolicy, Role,
};
use needforge::policy::SamplingConfig;
use needforge::reward::{EmbedError, Embedder, HashEmbedder};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: String,
}

type Handler = Box<dyn Fn(usize, &str) -> (u16, String) + Send>;

/// Serves `handler(request_index, body)` for every request; returns the base
/// URL and the log of received requests.
fn serve(handler: Handler) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for (i, stream) in listener.incoming().enumerate() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
            let (mut len, mut auth) = (0usize, None);
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                let h = h.trim_end();
                if h.is_empty() {
                    break;
                }
                let (name, value) = h.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => len = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let body = String::from_utf8(body).unwrap();
            let (status, reply) = handler(i, &body);
            log.lock().unwrap().push(Seen { path, auth, body });
            let resp = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
                reply.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    (base, seen)
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy { backoff: vec![Duration::from_millis(1); 3] }
}

fn chat_reply(content: &str) -> String {
    serde_json::json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] }).to_string()
}

fn hello() -> Vec<ChatMessage> {
    vec![ChatMessage::new(Role::User, "hello")]
}

#[test]
fn retries_transient_failures_then_succeeds() {
    let (base, seen) = serve(Box::new(|i, _| match i {
        0 => (503, "busy".into()),
        1 => (429, "slow down".into()),
        _ => (200, chat_reply("ok")),
    }));
    let b = HttpChatBackend::new(&base, "m").unwrap().with_retry(fast_retry()).with_api_key(Some("sekrit".into()));
    assert_eq!(b.complete(&hello(), &SamplingConfig::default()).unwrap(), "ok");
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen[0].path, "/chat/completions");
    assert_eq!(seen[2].auth.as_deref(), Some("Bearer sekrit"));
    let body: serde_json::Value = serde_json::from_str(&seen[2].body).unwrap();
    assert_eq!(body["model"], "m");
    assert_eq!(body["messages"][0]["content"], "hello");
}

#[test]
fn client_errors_are_not_retried() {
    let (base, seen) = serve(Box::new(|_, _| (400, "bad".into())));
    let b = HttpChatBackend::new(&base, "m").unwrap().with_retry(fast_retry()).with_api_key(None);
    match b.complete(&hello(), &SamplingConfig::default()) {
        Err(BackendError::Status { status: 400, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
    assert!(seen.lock().unwrap()[0].auth.is_none());
}

#[test]
fn gives_up_after_three_retries() {
    let (base, seen) = serve(Box::new(|_, _| (500, "down".into())));
    let b = HttpChatBackend::new(&base, "m").unwrap().with_retry(fast_retry());
    assert!(matches!(b.complete(&hello(), &SamplingConfig::default()), Err(BackendError::Status { status: 500, .. })));
    assert_eq!(seen.lock().unwrap().len(), 4);
}

#[test]
fn malformed_reply_is_bad_response() {
    let (base, _) = serve(Box::new(|_, _| (200, r#"{"choices": []}"#.into())));
    let b = HttpChatBackend::new(&base, "m").unwrap().with_retry(RetryPolicy::none());
    assert!(matches!(b.complete(&hello(), &SamplingConfig::default()), Err(BackendError::BadResponse(_))));
}

#[test]
fn embedder_normalizes_and_checks_dimension() {
    let (base, seen) = serve(Box::new(|_, body| {
        let n = serde_json::from_str::<serde_json::Value>(body).unwrap()["input"].as_array().unwrap().len();
        let data: Vec<_> = (0..n).map(|_| serde_json::json!({ "embedding": [3.0, 4.0] })).collect();
        (200, serde_json::json!({ "data": data }).to_string())
    }));
    let e = HttpEmbedder::new(&base, "emb", 2).unwrap().with_retry(RetryPolicy::none());
    let v = e.embed("anything").unwrap();
    assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
    assert_eq!(e.embed_batch(&["a", "b"]).unwrap().len(), 2);
    assert_eq!(seen.lock().unwrap()[0].path, "/embeddings");

    let wrong = HttpEmbedder::new(&base, "emb", 3).unwrap().with_retry(RetryPolicy::none());
    assert!(matches!(wrong.embed("x"), Err(EmbedError::Dimension { expected: 3, found: 2 })));
}

#[test]
fn pipeline_runs_over_http() {
    let case = case_studies().remove(0);
    let fixture = case.fixture.clone();
    let (base, seen) = serve(Box::new(move |_, body| {
        let content = if body.contains("## Step 1") {
            &fixture.intent
        } else if body.contains("## Step 2") {
            &fixture.category
        } else {
            &fixture.behavior
        };
        (200, chat_reply(content))
    }));
    let b = HttpChatBackend::new(&base, "m").unwrap().with_retry(RetryPolicy::none());
    let tax = case_study_taxonomy();
    let t = run_pipeline(&b, &HashEmbedder::new(256, 0), &tax, &case.user, &case.context, &SamplingConfig::default()).unwrap();
    assert_eq!(seen.lock().unwrap().len(), 3);
    assert_eq!(t.backend.kind, "http");
    assert_eq!(tax.needs()[t.decision.need_id.unwrap()].label, case.expected_need);
    assert_eq!(tax.categories()[t.decision.category_id].label, case.expected_category);
    assert_eq!(tax.behaviors()[t.decision.behavior_id].label, case.expected_behavior);
}
