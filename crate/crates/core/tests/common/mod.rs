//! Minimal HTTP/1.1 chat-completions server on a loopback port.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::{json, Value};

pub struct Reply {
    pub status: u16,
    pub body: String,
}

impl Reply {
    pub fn ok(contents: &[String]) -> Reply {
        let choices: Vec<Value> = contents
            .iter()
            .enumerate()
            .map(|(i, c)| json!({"index": i, "message": {"role": "assistant", "content": c}}))
            .collect();
        Reply {
            status: 200,
            body: json!({ "choices": choices }).to_string(),
        }
    }

    pub fn error(status: u16, msg: &str) -> Reply {
        Reply {
            status,
            body: json!({ "error": { "message": msg } }).to_string(),
        }
    }
}

/// A recorded request: headers (lower-cased names) and parsed JSON body.
#[derive(Debug, Clone)]
pub struct Seen {
    pub headers: Vec<(String, String)>,
    pub body: Value,
}

impl Seen {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }

    /// All text parts of all messages, joined.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for m in self.body["messages"].as_array().into_iter().flatten() {
            for p in m["content"].as_array().into_iter().flatten() {
                if let Some(t) = p["text"].as_str() {
                    out.push_str(t);
                    out.push('\n');
                }
            }
        }
        out
    }

    pub fn has_image(&self) -> bool {
        self.body["messages"]
            .as_array()
            .into_iter()
            .flatten()
            .flat_map(|m| m["content"].as_array().into_iter().flatten())
            .any(|p| p["type"] == "image_url")
    }
}

type Handler = dyn Fn(&Seen, usize) -> Reply + Send + Sync;

pub struct MockServer {
    pub base_url: String,
    pub seen: Arc<Mutex<Vec<Seen>>>,
}

impl MockServer {
    /// `handler` gets each request and its zero-based arrival index.
    pub fn start(handler: impl Fn(&Seen, usize) -> Reply + Send + Sync + 'static) -> MockServer {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let log = Arc::clone(&seen);
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let handler = Arc::clone(&handler);
                let log = Arc::clone(&log);
                thread::spawn(move || serve(stream, &*handler, &log));
            }
        });
        MockServer {
            base_url: format!("http://{addr}/v1"),
            seen,
        }
    }

    pub fn requests(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

fn serve(stream: TcpStream, handler: &Handler, log: &Mutex<Vec<Seen>>) {
    let mut writer = stream.try_clone().expect("clone stream");
    let mut reader = BufReader::new(stream);
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
            return;
        }
        let mut headers = Vec::new();
        let mut len = 0usize;
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                return;
            }
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            if let Some((k, v)) = line.split_once(':') {
                let k = k.trim().to_ascii_lowercase();
                let v = v.trim().to_string();
                if k == "content-length" {
                    len = v.parse().unwrap_or(0);
                }
                headers.push((k, v));
            }
        }
        let mut body = vec![0u8; len];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        let seen = Seen {
            headers,
            body: serde_json::from_slice(&body).unwrap_or(Value::Null),
        };
        let index = {
            let mut l = log.lock().unwrap();
            l.push(seen.clone());
            l.len() - 1
        };
        let reply = if request_line.starts_with("POST ") && request_line.contains("/chat/completions") {
            handler(&seen, index)
        } else {
            Reply::error(404, "not found")
        };
        let head = format!(
            "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
            reply.status,
            reply.body.len()
        );
        if writer.write_all(head.as_bytes()).is_err() || writer.write_all(reply.body.as_bytes()).is_err() {
            return;
        }
    }
}

/// Replies like a tiny model: forward prompts get `answer`, everything else
/// gets `question`. Honors `n`.
pub fn echo_model(question: &'static str, answer: &'static str) -> impl Fn(&Seen, usize) -> Reply {
    move |seen, _| {
        let n = seen.body["n"].as_u64().unwrap_or(1) as usize;
        let text = seen.text();
        let content = if text.contains(question) { answer } else { question };
        Reply::ok(&vec![content.to_string(); n])
    }
}

/// Rows and metadata behind `tests/golden/report.md`.
pub fn report_fixture() -> (Vec<cycle_reward::eval::EvalRow>, cycle_reward::eval::ReportMeta) {
    use cycle_reward::eval::{EvalRow, PathStats, ReportMeta, VoteStats};
    use cycle_reward::MatcherPolicy;

    let policy = MatcherPolicy::default();
    let mut rows = Vec::new();
    for i in 0..100 {
        let image = if i < 60 { "Paris" } else { "London" };
        let text = if i % 4 == 0 { "paris." } else { "Paris" };
        rows.push(EvalRow::from_predictions(
            &format!("doc-{i:03}"),
            "docvqa",
            Some(text),
            Some(image),
            Some("Paris"),
            &policy,
            None,
        ));
    }
    let choices: Vec<String> = ["A", "B", "C", "D", "E", "F"].map(String::from).to_vec();
    for i in 0..20 {
        let text = if i < 5 { "B" } else { "A" };
        let image = if i < 15 { "A" } else { "C" };
        let gold = if i < 18 { Some("A") } else { None };
        rows.push(EvalRow::from_predictions(
            &format!("page-q{i}"),
            "vwa",
            Some(text),
            Some(image),
            gold,
            &policy,
            Some(&choices),
        ));
    }
    let stats = |groups, rollouts, rewarded, consistent_groups| PathStats {
        groups,
        rollouts,
        rewarded,
        consistent_groups,
    };
    let meta = ReportMeta {
        run_id: "0123456789abcdef".into(),
        backend_fingerprint: "scripted:fixture".into(),
        matcher: "numeric 5% relative".into(),
        votes: Some(VoteStats {
            records: 40,
            tie_broken: 6,
        }),
        cycles: Some(
            [
                ("II".to_string(), stats(10, 40, 31, 6)),
                ("IT".to_string(), stats(10, 40, 22, 3)),
                ("TI".to_string(), stats(10, 40, 27, 4)),
                ("TT".to_string(), stats(10, 40, 35, 8)),
            ]
            .into_iter()
            .collect(),
        ),
    };
    (rows, meta)
}
