//! Scripted local HTTP server standing in for a generation endpoint.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crate::error::{FlapError, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum MockReply {
    /// 200 with `{"text": ...}`.
    Text(String),
    /// Bare status code with an empty JSON object body.
    Status(u16),
}

/// Serves the scripted replies in order, repeating the last one forever.
/// Request bodies are recorded for inspection.
pub struct MockEndpoint {
    url: String,
    stop: Arc<AtomicBool>,
    requests: Arc<Mutex<Vec<String>>>,
    handle: Option<JoinHandle<()>>,
}

impl MockEndpoint {
    pub fn start(script: Vec<MockReply>) -> Result<Self> {
        if script.is_empty() {
            return Err(FlapError::Input("mock endpoint needs at least one reply".into()));
        }
        let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| FlapError::io("127.0.0.1:0", e))?;
        let addr = listener.local_addr().map_err(|e| FlapError::io("127.0.0.1:0", e))?;
        let stop = Arc::new(AtomicBool::new(false));
        let requests = Arc::new(Mutex::new(Vec::new()));
        let (stop_t, req_t) = (stop.clone(), requests.clone());
        let handle = std::thread::spawn(move || {
            let mut served = 0usize;
            for stream in listener.incoming() {
                if stop_t.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let reply = &script[served.min(script.len() - 1)];
                served += 1;
                if let Ok(body) = serve(stream, reply) {
                    req_t.lock().expect("mock lock").push(body);
                }
            }
        });
        Ok(MockEndpoint {
            url: format!("http://{addr}/generate"),
            stop,
            requests,
            handle: Some(handle),
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn requests(&self) -> Vec<String> {
        self.requests.lock().expect("mock lock").clone()
    }
}

impl Drop for MockEndpoint {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let addr = self.url.trim_start_matches("http://").trim_end_matches("/generate");
        let _ = TcpStream::connect(addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, reply: &MockReply) -> std::io::Result<String> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 || line == "\r\n" {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body)?;
    let (code, payload) = match reply {
        MockReply::Text(t) => (200, serde_json::json!({ "text": t }).to_string()),
        MockReply::Status(c) => (*c, "{}".to_string()),
    };
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {code} MOCK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    )?;
    stream.flush()?;
    Ok(String::from_utf8_lossy(&body).into_owned())
}
