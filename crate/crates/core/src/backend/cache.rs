//! Append-only response cache. One JSON line per stored call:
//! `{key, responses, timestamp}`.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, CompletionRequest, RetryPolicy};
use crate::jsonl::sha256_hex;

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    key: String,
    responses: Vec<String>,
    timestamp: u64,
}

#[derive(Debug)]
pub struct ResponseCache {
    path: PathBuf,
    entries: RwLock<HashMap<String, Vec<String>>>,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    pub const FILE: &'static str = ".cache/responses.jsonl";

    /// Opens (or creates) the cache for a run directory.
    pub fn open(run_dir: &Path) -> Result<Self, BackendError> {
        Self::open_file(run_dir.join(Self::FILE))
    }

    pub fn open_file(path: PathBuf) -> Result<Self, BackendError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| BackendError::Cache(e.to_string()))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                // A torn final line from an interrupted run is skipped.
                if let Ok(rec) = serde_json::from_str::<CacheLine>(line) {
                    entries.insert(rec.key, rec.responses);
                }
            }
            if !text.is_empty() && !text.ends_with('\n') {
                let mut f = OpenOptions::new()
                    .append(true)
                    .open(&path)
                    .map_err(|e| BackendError::Cache(e.to_string()))?;
                writeln!(f).map_err(|e| BackendError::Cache(e.to_string()))?;
            }
        }
        Ok(ResponseCache {
            path,
            entries: RwLock::new(entries),
            write_lock: Mutex::new(()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn key(fingerprint: &str, req: &CompletionRequest, record_key: &str) -> String {
        sha256_hex(format!("{fingerprint}\0{}\0{record_key}", req.digest()).as_bytes())
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<Vec<String>> {
        if !self.path.exists() {
            // File removed underneath us: treat everything as a miss.
            let mut w = self.entries.write().unwrap();
            w.clear();
            return None;
        }
        self.entries.read().unwrap().get(key).cloned()
    }

    pub fn put(&self, key: &str, responses: &[String]) -> Result<(), BackendError> {
        let _guard = self.write_lock.lock().unwrap();
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir).map_err(|e| BackendError::Cache(e.to_string()))?;
        }
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let line = serde_json::to_string(&CacheLine {
            key: key.to_string(),
            responses: responses.to_vec(),
            timestamp,
        })
        .expect("cache line serializes");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| BackendError::Cache(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| BackendError::Cache(e.to_string()))?;
        self.entries
            .write()
            .unwrap()
            .insert(key.to_string(), responses.to_vec());
        Ok(())
    }
}

/// Serves from the cache when possible; otherwise calls the backend (with
/// retries) and stores the result.
pub fn cached_complete(
    cache: &ResponseCache,
    backend: &dyn Backend,
    retry: &RetryPolicy,
    req: &CompletionRequest,
    record_key: &str,
) -> Result<Vec<String>, BackendError> {
    let key = ResponseCache::key(backend.fingerprint(), req, record_key);
    if let Some(hit) = cache.get(&key) {
        return Ok(hit);
    }
    let responses = retry.run(record_key, || backend.complete(req))?;
    cache.put(&key, &responses)?;
    Ok(responses)
}
