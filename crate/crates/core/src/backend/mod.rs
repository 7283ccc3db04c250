//! The model as a chat-completion service.
//!
//! [`Backend`] is the single call surface. [`live::LiveBackend`] speaks the
//! common chat-completions wire protocol, [`scripted::ScriptedBackend`] replays
//! rule files deterministically, and [`ModelClient`] layers retries and the
//! on-disk response cache over either.

pub mod cache;
pub mod live;
pub mod retry;
pub mod scripted;
pub mod template;

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{ImageRef, Modality, SamplingParams};
use crate::jsonl::sha256_hex;

pub use cache::ResponseCache;
pub use retry::RetryPolicy;
pub use scripted::{MatchOn, Respond, ScriptRule, ScriptedBackend};
pub use template::{assemble_prompt, clean_generation, Direction, PromptError, TemplateFamily, TemplateId, TemplateRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Text(String),
    Image(ImageRef),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl ChatMessage {
    pub fn user_text(s: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            parts: vec![Part::Text(s.into())],
        }
    }

    pub fn text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Text(t) => Some(t.as_str()),
                Part::Image(_) => None,
            })
            .collect()
    }

    pub fn has_image(&self) -> bool {
        self.parts.iter().any(|p| matches!(p, Part::Image(_)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Backward,
    Forward,
    Caption,
}

/// What a request is for. Not sent over the wire; scripted rules match on it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestContext {
    pub task: TaskKind,
    pub modality: Modality,
    pub answer: Option<String>,
    pub query: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    pub sampling: SamplingParams,
    pub n: usize,
    pub context: RequestContext,
}

impl CompletionRequest {
    /// Digest of everything that is sent to the model.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct Wire<'a> {
            messages: &'a [ChatMessage],
            sampling: &'a SamplingParams,
            n: usize,
        }
        let body = serde_json::to_vec(&Wire {
            messages: &self.messages,
            sampling: &self.sampling,
            n: self.n,
        })
        .expect("request serializes");
        sha256_hex(&body)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("permanent backend failure: {0}")]
    Permanent(String),
    #[error("no script rule matches request: {0}")]
    ScriptMiss(String),
    #[error("record {record_key}: {source} (after {attempts} attempt(s))")]
    Failed {
        record_key: String,
        attempts: u32,
        #[source]
        source: Box<BackendError>,
    },
    #[error("response cache: {0}")]
    Cache(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transient(_))
    }

    /// The innermost error, past any record-key wrapping.
    pub fn root(&self) -> &BackendError {
        match self {
            BackendError::Failed { source, .. } => source.root(),
            other => other,
        }
    }
}

pub trait Backend: Send + Sync {
    fn fingerprint(&self) -> &str;

    /// Returns exactly `req.n` completions.
    fn complete(&self, req: &CompletionRequest) -> Result<Vec<String>, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn fingerprint(&self) -> &str {
        (**self).fingerprint()
    }
    fn complete(&self, req: &CompletionRequest) -> Result<Vec<String>, BackendError> {
        (**self).complete(req)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    LiveEndpoint {
        base_url: String,
        model_name: String,
        auth_token_env: String,
    },
    Scripted {
        script_path: String,
        rng_seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub fingerprint: String,
}

impl BackendDescriptor {
    pub fn live(base_url: &str, model_name: &str, auth_token_env: &str) -> Self {
        let base_url = base_url.trim_end_matches('/').to_string();
        let fingerprint = sha256_hex(format!("live\0{base_url}\0{model_name}").as_bytes());
        BackendDescriptor {
            kind: BackendKind::LiveEndpoint {
                base_url,
                model_name: model_name.to_string(),
                auth_token_env: auth_token_env.to_string(),
            },
            fingerprint,
        }
    }

    /// Fingerprint covers the script contents and seed, not its location.
    pub fn scripted(script_path: impl Into<PathBuf>, rng_seed: u64) -> Result<Self, BackendError> {
        let path: PathBuf = script_path.into();
        let bytes = std::fs::read(&path)
            .map_err(|e| BackendError::Permanent(format!("{}: {e}", path.display())))?;
        let fingerprint = scripted::fingerprint_for(&bytes, rng_seed);
        Ok(BackendDescriptor {
            kind: BackendKind::Scripted {
                script_path: path.to_string_lossy().into_owned(),
                rng_seed,
            },
            fingerprint,
        })
    }

    pub fn open(&self) -> Result<Arc<dyn Backend>, BackendError> {
        match &self.kind {
            BackendKind::LiveEndpoint {
                base_url,
                model_name,
                auth_token_env,
            } => Ok(Arc::new(live::LiveBackend::new(
                base_url,
                model_name,
                auth_token_env,
            )?)),
            BackendKind::Scripted {
                script_path,
                rng_seed,
            } => Ok(Arc::new(ScriptedBackend::from_file(
                std::path::Path::new(script_path),
                *rng_seed,
            )?)),
        }
    }
}

/// Wraps a backend and counts `complete` calls.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B: Backend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        CountingBackend {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: Backend> Backend for CountingBackend<B> {
    fn fingerprint(&self) -> &str {
        self.inner.fingerprint()
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Vec<String>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(req)
    }
}

/// Backend plus retry policy plus optional response cache; what the
/// pipeline stages call.
#[derive(Clone)]
pub struct ModelClient {
    backend: Arc<dyn Backend>,
    cache: Option<Arc<ResponseCache>>,
    retry: RetryPolicy,
}

impl ModelClient {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        ModelClient {
            backend,
            cache: None,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn fingerprint(&self) -> &str {
        self.backend.fingerprint()
    }

    pub fn call(&self, req: &CompletionRequest, record_key: &str) -> Result<Vec<String>, BackendError> {
        match &self.cache {
            Some(cache) => cache::cached_complete(cache, self.backend.as_ref(), &self.retry, req, record_key),
            None => self
                .retry
                .run(record_key, || self.backend.complete(req)),
        }
    }
}
