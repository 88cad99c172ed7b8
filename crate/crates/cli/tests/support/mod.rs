#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

/// Scripted HTTP/1.1 server on 127.0.0.1. Each connection gets the next
/// `(status, body)` pair; once the script runs out the last entry repeats.
pub struct MockServer {
    pub url: String,
    hits: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<String>>>,
    _handle: JoinHandle<()>,
}

impl MockServer {
    pub fn start(script: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let (h, b) = (hits.clone(), bodies.clone());
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut content_length = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap_or(0);
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut body = vec![0u8; content_length];
                let _ = reader.read_exact(&mut body);
                b.lock().unwrap().push(String::from_utf8_lossy(&body).into_owned());
                let i = h.fetch_add(1, Ordering::SeqCst);
                let (status, text) = script[i.min(script.len() - 1)].clone();
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                    text.len()
                );
                let _ = stream.write_all(resp.as_bytes());
                let _ = stream.flush();
            }
        });
        MockServer {
            url,
            hits,
            bodies,
            _handle: handle,
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn bodies(&self) -> Vec<String> {
        self.bodies.lock().unwrap().clone()
    }
}

/// A chat-completions reply whose message content is `content`.
pub fn chat_reply(content: &str) -> (u16, String) {
    (
        200,
        serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string(),
    )
}

pub const VALID_TWO: &str = r#"{"high_level":"a harbor at dawn","regions":[{"index":0,"text":"pale pink sky"},{"index":1,"text":"calm teal water"}],"negative":"blurry"}"#;
pub const DUPLICATE_TWO: &str = r#"{"high_level":"h","regions":[{"index":1,"text":"a"},{"index":1,"text":"b"}],"negative":"n"}"#;
pub const MISSING_NEGATIVE: &str = r#"{"high_level":"h","regions":[{"index":0,"text":"a"},{"index":1,"text":"b"}]}"#;

pub fn schema() -> serde_json::Value {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/progressive_prompt.schema.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}
