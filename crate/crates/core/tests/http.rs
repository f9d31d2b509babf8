//! Remote embedding and chat backends against a local stand-in server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use recgen::embed::{Embedder, EmbedderConfig};
use recgen::http::RetryPolicy;
use recgen::llm::{ChatClient, ChatPrompt, EndpointConfig, FinishReason, LlmError, RemoteChatClient};
use serde_json::{json, Value};

type Handler = dyn Fn(&Value) -> (u16, Value) + Send + Sync;

/// Serves requests until the test ends; records every request body.
struct Server {
    url: String,
    requests: Arc<Mutex<Vec<Value>>>,
}

fn serve(handler: Box<Handler>) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/endpoint", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let seen = requests.clone();
    let handler: Arc<Handler> = handler.into();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let seen = seen.clone();
            let handler = handler.clone();
            thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut length = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap() == 0 {
                        return;
                    }
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    if let Some((name, value)) = line.split_once(':') {
                        if name.eq_ignore_ascii_case("content-length") {
                            length = value.trim().parse().unwrap();
                        }
                    }
                }
                let mut body = vec![0u8; length];
                reader.read_exact(&mut body).unwrap();
                let request: Value = serde_json::from_slice(&body).unwrap();
                let (status, reply) = {
                    let mut seen = seen.lock().unwrap();
                    seen.push(request.clone());
                    handler(&request)
                };
                let reply = reply.to_string();
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
                    reply.len()
                );
            });
        }
    });
    Server { url, requests }
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        attempts: 3,
        base_delay_ms: 1,
    }
}

fn embed_config(url: &str, dim: usize, batch_size: usize) -> EmbedderConfig {
    let mut config = EmbedderConfig::remote(url, "test-embed", dim);
    config.batch_size = batch_size;
    config.retry = fast_retry();
    config
}

#[test]
fn embeddings_are_batched_reordered_and_normalized() {
    let server = serve(Box::new(|req| {
        let inputs = req["input"].as_array().unwrap();
        // answer in reverse order; the client sorts by index
        let data: Vec<Value> = inputs
            .iter()
            .enumerate()
            .rev()
            .map(|(i, text)| {
                let n = text.as_str().unwrap().len() as f64;
                json!({ "index": i, "embedding": [n, 0.0, n] })
            })
            .collect();
        (200, json!({ "data": data }))
    }));
    let embedder = Embedder::new(embed_config(&server.url, 3, 2)).unwrap();
    let vectors = embedder.embed(&["a", "bb", "ccc"]).unwrap();
    assert_eq!(vectors.len(), 3);
    let h = std::f64::consts::FRAC_1_SQRT_2;
    for v in &vectors {
        assert!((v.values()[0] - h).abs() < 1e-12 && (v.values()[2] - h).abs() < 1e-12);
    }
    let requests = server.requests.lock().unwrap();
    let mut inputs: Vec<Value> = requests.iter().map(|r| r["input"].clone()).collect();
    inputs.sort_by_key(|v| v.to_string());
    assert_eq!(inputs, [json!(["a", "bb"]), json!(["ccc"])]);
    assert!(requests.iter().all(|r| r["model"] == "test-embed"));
}

#[test]
fn embedding_dim_mismatch_fails() {
    let server = serve(Box::new(|_| (200, json!({ "data": [{ "embedding": [1.0, 2.0] }] }))));
    let embedder = Embedder::new(embed_config(&server.url, 3, 8)).unwrap();
    let err = embedder.embed(&["x"]).unwrap_err();
    assert!(err.to_string().contains('3'), "{err}");
}

#[test]
fn transient_errors_are_retried() {
    let calls = Arc::new(Mutex::new(0));
    let counter = calls.clone();
    let server = serve(Box::new(move |_| {
        let mut n = counter.lock().unwrap();
        *n += 1;
        if *n < 3 {
            (503, json!({ "error": "busy" }))
        } else {
            (200, json!({ "data": [{ "embedding": [0.0, 2.0] }] }))
        }
    }));
    let embedder = Embedder::new(embed_config(&server.url, 2, 8)).unwrap();
    let v = embedder.embed_one("x").unwrap();
    assert_eq!(v.values(), [0.0, 1.0]);
    assert_eq!(*calls.lock().unwrap(), 3);
}

fn chat_client(url: &str) -> RemoteChatClient {
    let mut config = EndpointConfig::http(url, "test-chat");
    config.retry = fast_retry();
    RemoteChatClient::new(&config).unwrap()
}

#[test]
fn chat_request_shape_and_reply() {
    let server = serve(Box::new(|_| {
        (200, json!({ "choices": [{ "message": { "role": "assistant", "content": "Heat" }, "finish_reason": "length" }] }))
    }));
    let client = chat_client(&server.url);
    let mut prompt = ChatPrompt::user("pick one", 64);
    prompt.temperature = 0.1;
    let response = client.complete(&prompt).unwrap();
    assert_eq!(response.content, "Heat");
    assert_eq!(response.finish_reason, FinishReason::Length);
    let request = server.requests.lock().unwrap()[0].clone();
    assert_eq!(request["model"], "test-chat");
    assert_eq!(request["max_tokens"], 64);
    assert_eq!(request["temperature"], 0.1);
    assert_eq!(request["messages"], json!([{ "role": "user", "content": "pick one" }]));
}

#[test]
fn client_errors_are_not_retried() {
    let server = serve(Box::new(|_| (400, json!({ "error": "bad request" }))));
    let client = chat_client(&server.url);
    let err = client.complete(&ChatPrompt::user("x", 8)).unwrap_err();
    assert!(matches!(err, LlmError::Http(ref e) if e.attempts == 1 && e.status == Some(400)), "{err:?}");
    assert_eq!(server.requests.lock().unwrap().len(), 1);
}

#[test]
fn persistent_failure_gives_up_after_three_attempts() {
    let server = serve(Box::new(|_| (500, json!({}))));
    let client = chat_client(&server.url);
    let err = client.complete(&ChatPrompt::user("x", 8)).unwrap_err();
    assert!(matches!(err, LlmError::Http(ref e) if e.attempts == 3), "{err:?}");
    assert_eq!(server.requests.lock().unwrap().len(), 3);
}
