//! Client for `POST <base_url>/chat/completions`.

use std::time::Duration;

use base64::Engine;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{Backend, BackendDescriptor, BackendError, ChatMessage, CompletionRequest, Part, Role};
use crate::datamodel::ImageRef;
use crate::jsonl::sha256_hex;

pub struct LiveBackend {
    http: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    token: Option<String>,
    fingerprint: String,
}

impl LiveBackend {
    pub fn new(base_url: &str, model: &str, auth_token_env: &str) -> Result<Self, BackendError> {
        let desc = BackendDescriptor::live(base_url, model, auth_token_env);
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| BackendError::Permanent(format!("http client: {e}")))?;
        let token = std::env::var(auth_token_env).ok().filter(|t| !t.is_empty());
        Ok(LiveBackend {
            http,
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.to_string(),
            token,
            fingerprint: desc.fingerprint,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn body(&self, req: &CompletionRequest, n: usize, seed: Option<u64>) -> Result<Value, BackendError> {
        let messages = req
            .messages
            .iter()
            .map(wire_message)
            .collect::<Result<Vec<_>, _>>()?;
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": req.sampling.temperature,
            "top_p": req.sampling.top_p,
            "n": n,
            "max_tokens": req.sampling.max_tokens,
        });
        if let Some(seed) = seed {
            body["seed"] = json!(seed);
        }
        Ok(body)
    }

    fn post(&self, body: &Value) -> Result<Vec<String>, BackendError> {
        let mut rb = self.http.post(&self.endpoint).json(body);
        if let Some(t) = &self.token {
            rb = rb.bearer_auth(t);
        }
        let resp = rb.send().map_err(classify_transport)?;
        let status = resp.status();
        let text = resp.text().map_err(classify_transport)?;
        if !status.is_success() {
            let msg = format!("HTTP {status}: {}", truncate(&text, 300));
            return Err(if is_transient_status(status) {
                BackendError::Transient(msg)
            } else {
                BackendError::Permanent(msg)
            });
        }
        parse_choices(&text)
    }
}

impl Backend for LiveBackend {
    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Vec<String>, BackendError> {
        if req.n == 0 {
            return Err(BackendError::Permanent("n must be >= 1".into()));
        }
        let mut out = match self.post(&self.body(req, req.n, req.sampling.seed)?) {
            Ok(v) => v,
            // Some servers refuse n > 1; fall back to one request per sample.
            Err(BackendError::Permanent(msg)) if req.n > 1 && is_rejection(&msg) => {
                log::debug!("server rejected n={}: {msg}; sampling sequentially", req.n);
                Vec::new()
            }
            Err(e) => return Err(e),
        };
        out.truncate(req.n);
        while out.len() < req.n {
            let seed = derived_seed(req.sampling.seed, out.len());
            let mut one = self.post(&self.body(req, 1, Some(seed))?)?;
            if one.is_empty() {
                return Err(BackendError::Transient("server returned no choices".into()));
            }
            out.push(one.swap_remove(0));
        }
        Ok(out)
    }
}

fn is_rejection(msg: &str) -> bool {
    msg.starts_with("HTTP 400") || msg.starts_with("HTTP 422")
}

/// Distinct per-completion seed for sequential fallback sampling.
pub fn derived_seed(base: Option<u64>, index: usize) -> u64 {
    let h = sha256_hex(format!("{}\0{index}", base.unwrap_or(0)).as_bytes());
    u64::from_str_radix(&h[..16], 16).expect("hex digest")
}

fn is_transient_status(s: StatusCode) -> bool {
    s == StatusCode::REQUEST_TIMEOUT
        || s == StatusCode::CONFLICT
        || s == StatusCode::TOO_MANY_REQUESTS
        || s.is_server_error()
}

fn classify_transport(e: reqwest::Error) -> BackendError {
    if e.is_timeout() || e.is_connect() || e.is_request() || e.is_body() {
        BackendError::Transient(e.to_string())
    } else {
        BackendError::Permanent(e.to_string())
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn wire_message(m: &ChatMessage) -> Result<Value, BackendError> {
    let role = match m.role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    };
    let content = m
        .parts
        .iter()
        .map(|p| match p {
            Part::Text(t) => Ok(json!({"type": "text", "text": t})),
            Part::Image(r) => Ok(json!({"type": "image_url", "image_url": {"url": image_url(r)?}})),
        })
        .collect::<Result<Vec<_>, BackendError>>()?;
    Ok(json!({"role": role, "content": content}))
}

/// URL form of an image reference. Local files are inlined as base64 data URLs.
pub fn image_url(r: &ImageRef) -> Result<String, BackendError> {
    match r {
        ImageRef::Url(u) => Ok(u.clone()),
        ImageRef::Base64 { media_type, data } => Ok(format!("data:{media_type};base64,{data}")),
        ImageRef::Path(p) => {
            let bytes = std::fs::read(p)
                .map_err(|e| BackendError::Permanent(format!("image {p}: {e}")))?;
            let ext = std::path::Path::new(p)
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase)
                .unwrap_or_default();
            let media_type = match ext.as_str() {
                "jpg" | "jpeg" => "image/jpeg",
                "gif" => "image/gif",
                "webp" => "image/webp",
                "bmp" => "image/bmp",
                _ => "image/png",
            };
            let data = base64::engine::general_purpose::STANDARD.encode(bytes);
            Ok(format!("data:{media_type};base64,{data}"))
        }
    }
}

/// Pulls `choices[*].message.content`; content may be a string or a list of
/// typed parts.
pub fn parse_choices(body: &str) -> Result<Vec<String>, BackendError> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| BackendError::Transient(format!("malformed response body: {e}")))?;
    let choices = v
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Transient("response has no choices array".into()))?;
    let mut indexed: Vec<(u64, String)> = choices
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let idx = c.get("index").and_then(Value::as_u64).unwrap_or(i as u64);
            let content = &c["message"]["content"];
            let text = match content {
                Value::String(s) => s.clone(),
                Value::Array(parts) => parts
                    .iter()
                    .filter_map(|p| p.get("text").and_then(Value::as_str))
                    .collect(),
                _ => String::new(),
            };
            (idx, text)
        })
        .collect();
    indexed.sort_by_key(|(i, _)| *i);
    Ok(indexed.into_iter().map(|(_, t)| t).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_string_and_part_content() {
        let body = r#"{"choices":[
            {"index":1,"message":{"role":"assistant","content":[{"type":"text","text":"b"}]}},
            {"index":0,"message":{"role":"assistant","content":"a"}}]}"#;
        assert_eq!(parse_choices(body).unwrap(), vec!["a", "b"]);
        assert!(matches!(parse_choices("{}"), Err(BackendError::Transient(_))));
    }

    #[test]
    fn wire_shape() {
        let m = ChatMessage {
            role: Role::User,
            parts: vec![
                Part::Text("OBS: ".into()),
                Part::Image(ImageRef::Url("https://x/y.png".into())),
            ],
        };
        let v = wire_message(&m).unwrap();
        assert_eq!(v["role"], "user");
        assert_eq!(v["content"][0]["type"], "text");
        assert_eq!(v["content"][1]["image_url"]["url"], "https://x/y.png");
    }

    #[test]
    fn path_images_become_data_urls() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jpg");
        std::fs::write(&p, [1u8, 2, 3]).unwrap();
        let url = image_url(&ImageRef::Path(p.to_string_lossy().into())).unwrap();
        assert_eq!(url, "data:image/jpeg;base64,AQID");
    }

    #[test]
    fn derived_seeds_distinct() {
        let s: std::collections::HashSet<u64> = (0..16).map(|i| derived_seed(Some(5), i)).collect();
        assert_eq!(s.len(), 16);
    }
}
