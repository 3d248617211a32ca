//! HttpBackend against a minimal local chat-completions server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use chemau_core::gateway::http::HttpBackend;
use chemau_core::gateway::{ChatMessage, GatewayError, ModelBackend, ModelRole, SamplingConfig};
use serde_json::{json, Value};

struct Seen {
    headers: Vec<String>,
    body: Value,
}

/// Serves one canned `(status, body)` per connection, in order.
fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<Seen>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, reply) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                headers.push(line);
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let _ = tx.send(Seen {
                headers,
                body: serde_json::from_slice(&body).unwrap_or(Value::Null),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn completion(text: &str, tokens: Option<&[(&str, f64)]>) -> String {
    let logprobs = tokens.map(|t| {
        json!({ "content": t.iter().map(|(tok, lp)| json!({
            "token": tok, "logprob": lp,
            "top_logprobs": [{ "token": tok, "logprob": lp }, { "token": "zz", "logprob": -9.0 }]
        })).collect::<Vec<_>>() })
    });
    json!({
        "id": "x",
        "choices": [{ "index": 0, "message": { "role": "assistant", "content": text },
                      "finish_reason": "stop", "logprobs": logprobs }]
    })
    .to_string()
}

fn prompt() -> Vec<ChatMessage> {
    vec![ChatMessage::system("sys"), ChatMessage::user("question")]
}

#[test]
fn decodes_chosen_tokens_and_sends_sampling_fields() {
    let body = completion("-- K4", Some(&[("-- ", 0.0), ("K4", (0.5f64).ln())]));
    let (url, rx) = serve(vec![(200, body)]);
    let backend = HttpBackend::new(&url, "gen").with_api_key("secret");
    let r = backend
        .complete(&prompt(), &SamplingConfig::general(), ModelRole::General)
        .unwrap();
    assert_eq!(r.text, "-- K4");
    assert_eq!(r.tokens.len(), 2);
    assert!((r.tokens[1].prob - 0.5).abs() < 1e-12);
    assert_eq!(r.tokens[0].prob, 1.0);

    let seen = rx.recv().unwrap();
    assert!(seen.headers.iter().any(|h| h == "authorization: Bearer secret"
        || h == "Authorization: Bearer secret"));
    assert_eq!(seen.body["model"], "gen");
    assert_eq!(seen.body["logprobs"], true);
    assert_eq!(seen.body["top_logprobs"], 4);
    assert_eq!(seen.body["temperature"], 0.3);
    assert_eq!(seen.body["max_tokens"], 1024);
    assert_eq!(seen.body["messages"][0]["role"], "system");
    assert_eq!(seen.body["messages"][1]["content"], "question");
}

#[test]
fn retries_once_after_server_error() {
    let ok = completion("ok", Some(&[("ok", -0.1)]));
    let (url, rx) = serve(vec![(500, "{}".into()), (200, ok)]);
    let backend = HttpBackend::new(&url, "gen");
    let r = backend
        .complete(&prompt(), &SamplingConfig::general(), ModelRole::General)
        .unwrap();
    assert_eq!(r.text, "ok");
    assert_eq!(rx.iter().take(2).count(), 2);
}

#[test]
fn second_failure_is_transport_error() {
    let (url, _rx) = serve(vec![(503, "{}".into()), (503, "{}".into())]);
    let backend = HttpBackend::new(&url, "gen");
    let err = backend
        .complete(&prompt(), &SamplingConfig::general(), ModelRole::General)
        .unwrap_err();
    assert!(matches!(err, GatewayError::Transport { .. }), "{err:?}");
}

#[test]
fn missing_logprobs_is_role_dependent() {
    let (url, _rx) = serve(vec![(200, completion("Correct.", None)), (200, completion("Correct.", None))]);
    let backend = HttpBackend::new(&url, "m");
    let err = backend
        .complete(&prompt(), &SamplingConfig::general(), ModelRole::General)
        .unwrap_err();
    assert!(matches!(err, GatewayError::Capability { .. }), "{err:?}");
    let r = backend
        .complete(&prompt(), &SamplingConfig::domain(), ModelRole::Domain)
        .unwrap();
    assert_eq!(r.text, "Correct.");
    assert!(r.tokens.is_empty());
}

#[test]
fn misaligned_tokens() {
    let bad = completion("abc", Some(&[("ab", -0.1)]));
    let (url, rx) = serve(vec![(200, bad.clone()), (200, bad)]);
    let backend = HttpBackend::new(&url, "m");
    let err = backend
        .complete(&prompt(), &SamplingConfig::general(), ModelRole::General)
        .unwrap_err();
    assert!(matches!(err, GatewayError::Integrity { .. }), "{err:?}");
    let r = backend
        .complete(&prompt(), &SamplingConfig::domain(), ModelRole::Domain)
        .unwrap();
    assert_eq!(r.text, "abc");
    assert!(r.tokens.is_empty());
    let domain_req = rx.iter().nth(1).unwrap();
    assert_eq!(domain_req.body["max_tokens"], 100);
}
