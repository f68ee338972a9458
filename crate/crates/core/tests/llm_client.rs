use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use cytocap::llm::{
    parse_choice, GenerationRequest, HttpClient, HttpConfig, LlmError, StubClient, TextGenerator,
};

#[test]
fn stub_is_deterministic_and_seed_sensitive() {
    let req = GenerationRequest::new("sys", "describe area hOc1 in one sentence");
    let a = StubClient.complete(&req).unwrap();
    let b = StubClient.complete(&req).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.provider, "stub");
    let c = StubClient.complete(&req.clone().with_seed(1)).unwrap();
    assert_ne!(a.text, c.text);
    let bad = GenerationRequest { max_tokens: 0, ..req };
    assert!(matches!(StubClient.complete(&bad), Err(LlmError::InvalidRequest(_))));
}

#[test]
fn choice_parsing() {
    assert_eq!(parse_choice("The answer is 3.", 8), Some(3));
    assert_eq!(parse_choice("12 then 5", 8), Some(5));
    assert_eq!(parse_choice("none", 8), None);
}

struct Mock {
    url: String,
    bodies: Arc<Mutex<Vec<String>>>,
    auth: Arc<Mutex<Vec<Option<String>>>>,
}

/// Serves one canned `(status, body)` per connection, in order.
fn mock_server(replies: Vec<(u16, String)>) -> Mock {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let auth = Arc::new(Mutex::new(Vec::new()));
    let (b2, a2) = (bodies.clone(), auth.clone());
    thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    authorization = Some(line["authorization:".len()..].trim().to_string());
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            b2.lock().unwrap().push(String::from_utf8(buf).unwrap());
            a2.lock().unwrap().push(authorization);
            let mut stream = stream;
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    Mock { url, bodies, auth }
}

fn ok_body(text: &str) -> String {
    serde_json::json!({
        "choices": [{ "message": { "role": "assistant", "content": text }, "finish_reason": "stop" }]
    })
    .to_string()
}

fn client(url: &str, retries: u32) -> HttpClient {
    HttpClient::new(HttpConfig {
        endpoint: url.to_string(),
        model: "mock-model".into(),
        timeout_secs: 5.0,
        max_retries: retries,
        backoff_base_ms: 1,
        api_key_env: None,
        max_in_flight: 2,
    })
    .unwrap()
}

#[test]
fn http_parses_fixture_payload() {
    let payload = "Layer IV is broad.\nLayer III has large pyramids.";
    let mock = mock_server(vec![(200, ok_body(payload))]);
    let req = GenerationRequest::new("system text", "user text").with_seed(42);
    let resp = client(&mock.url, 0).complete(&req).unwrap();
    assert_eq!(resp.text, payload);
    assert_eq!(resp.finish_reason, "stop");
    assert_eq!(resp.retries, 0);
    assert_eq!(resp.provider, "http:mock-model");
    let sent: serde_json::Value = serde_json::from_str(&mock.bodies.lock().unwrap()[0]).unwrap();
    assert_eq!(sent["model"], "mock-model");
    assert_eq!(sent["seed"], 42);
    assert_eq!(sent["messages"][0]["role"], "system");
    assert_eq!(sent["messages"][0]["content"], "system text");
    assert_eq!(sent["messages"][1]["content"], "user text");
}

#[test]
fn http_retries_server_errors_then_succeeds() {
    let replies = vec![
        (500, "{}".to_string()),
        (500, "{}".to_string()),
        (500, "{}".to_string()),
        (200, ok_body("finally")),
    ];
    let mock = mock_server(replies);
    let resp = client(&mock.url, 3).complete(&GenerationRequest::new("s", "u")).unwrap();
    assert_eq!(resp.text, "finally");
    assert_eq!(resp.retries, 3);
    assert_eq!(mock.bodies.lock().unwrap().len(), 4);
}

#[test]
fn http_retry_budget_exhaustion_surfaces() {
    let mock = mock_server(vec![(503, "busy".into()), (503, "busy".into())]);
    let err = client(&mock.url, 1).complete(&GenerationRequest::new("s", "u")).unwrap_err();
    match err {
        LlmError::RetriesExhausted { attempts, last } => {
            assert_eq!(attempts, 2);
            assert!(matches!(*last, LlmError::Status { status: 503, .. }));
        }
        other => panic!("{other}"),
    }
}

#[test]
fn http_client_errors_are_not_retried() {
    let mock = mock_server(vec![(400, "bad".into())]);
    let err = client(&mock.url, 3).complete(&GenerationRequest::new("s", "u")).unwrap_err();
    assert!(matches!(err, LlmError::Status { status: 400, .. }));
}

#[test]
fn http_malformed_body_is_typed() {
    let mock = mock_server(vec![(200, "{\"nope\": 1}".into())]);
    let err = client(&mock.url, 0).complete(&GenerationRequest::new("s", "u")).unwrap_err();
    assert!(matches!(err, LlmError::Malformed(_)));
}

#[test]
fn http_credentials_come_from_environment() {
    let var = "CYTOCAP_TEST_KEY_7f3a";
    let cfg = HttpConfig { api_key_env: Some(var.into()), ..HttpConfig::default() };
    assert!(matches!(HttpClient::new(cfg.clone()), Err(LlmError::MissingCredential(_))));
    // SAFETY: the variable name is unique to this test.
    unsafe { std::env::set_var(var, "sekret") };
    let mock = mock_server(vec![(200, ok_body("x"))]);
    let c = HttpClient::new(HttpConfig { endpoint: mock.url.clone(), ..cfg }).unwrap();
    c.complete(&GenerationRequest::new("s", "u")).unwrap();
    assert_eq!(mock.auth.lock().unwrap()[0].as_deref(), Some("Bearer sekret"));
    assert!(!serde_json::to_string(c.config()).unwrap().contains("sekret"));
}

#[test]
fn http_connection_refused_is_transport_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/", listener.local_addr().unwrap());
    drop(listener);
    let err = client(&url, 0).complete(&GenerationRequest::new("s", "u")).unwrap_err();
    assert!(matches!(err, LlmError::RetriesExhausted { attempts: 1, .. }), "{err}");
}
