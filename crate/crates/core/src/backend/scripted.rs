//! Deterministic rule-driven stand-in for a model.
//!
//! Rules are evaluated in file order and the first match answers. Each
//! completion draws from its own generator seeded by `(rng_seed, request
//! digest, completion index)`, so concurrent callers replay identically.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, CompletionRequest, TaskKind};
use crate::datamodel::Modality;
use crate::jsonl::{self, sha256_hex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchOn {
    /// The request carries a query (forward requests) containing the string.
    QueryContains(String),
    /// The request carries an answer slot (backward requests) equal to the
    /// string after trimming.
    AnswerEquals(String),
    /// The request is of this kind (backward, forward or caption).
    Task(TaskKind),
    Any,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Respond {
    Fixed(String),
    Distribution(Vec<(String, f64)>),
    /// Template with `{answer}` / `{query}` placeholders filled from the
    /// request context.
    Echo(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub match_on: MatchOn,
    #[serde(default)]
    pub modality_filter: Option<Modality>,
    pub respond: Respond,
}

impl ScriptRule {
    pub fn fixed(match_on: MatchOn, modality: Option<Modality>, text: &str) -> Self {
        ScriptRule {
            match_on,
            modality_filter: modality,
            respond: Respond::Fixed(text.to_string()),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if let Respond::Distribution(d) = &self.respond {
            if d.is_empty() {
                return Err("distribution is empty".into());
            }
            if let Some((s, p)) = d.iter().find(|(_, p)| p.is_nan() || *p <= 0.0) {
                return Err(format!("probability for {s:?} is not positive: {p}"));
            }
            let total: f64 = d.iter().map(|(_, p)| p).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(format!("probabilities sum to {total}, not 1"));
            }
        }
        Ok(())
    }

    fn applies(&self, req: &CompletionRequest) -> bool {
        if let Some(m) = self.modality_filter {
            if m != req.context.modality {
                return false;
            }
        }
        match &self.match_on {
            MatchOn::Any => true,
            MatchOn::QueryContains(s) => req.context.query.as_deref().is_some_and(|q| q.contains(s.as_str())),
            MatchOn::AnswerEquals(s) => req.context.answer.as_deref().is_some_and(|a| a.trim() == s.trim()),
            MatchOn::Task(t) => req.context.task == *t,
        }
    }
}

pub(crate) fn fingerprint_for(script_bytes: &[u8], rng_seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(b"scripted\0");
    h.update(Sha256::digest(script_bytes));
    h.update(rng_seed.to_le_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    rules: Vec<ScriptRule>,
    rng_seed: u64,
    fingerprint: String,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>, rng_seed: u64) -> Result<Self, BackendError> {
        for (i, r) in rules.iter().enumerate() {
            r.validate()
                .map_err(|e| BackendError::Permanent(format!("script rule {i}: {e}")))?;
        }
        let bytes = serde_json::to_vec(&rules).expect("rules serialize");
        let fingerprint = fingerprint_for(&bytes, rng_seed);
        Ok(ScriptedBackend {
            rules,
            rng_seed,
            fingerprint,
        })
    }

    pub fn from_file(path: &Path, rng_seed: u64) -> Result<Self, BackendError> {
        let rules: Vec<ScriptRule> =
            jsonl::read(path).map_err(|e| BackendError::Permanent(e.to_string()))?;
        let bytes = std::fs::read(path).map_err(|e| BackendError::Permanent(e.to_string()))?;
        let mut b = Self::new(rules, rng_seed)?;
        b.fingerprint = fingerprint_for(&bytes, rng_seed);
        Ok(b)
    }

    pub fn rules(&self) -> &[ScriptRule] {
        &self.rules
    }

    fn draw(&self, digest: &str, index: usize) -> f64 {
        let mut h = Sha256::new();
        h.update(self.rng_seed.to_le_bytes());
        h.update(digest.as_bytes());
        h.update((index as u64).to_le_bytes());
        let seed: [u8; 32] = h.finalize().into();
        ChaCha8Rng::from_seed(seed).random::<f64>()
    }
}

impl Backend for ScriptedBackend {
    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Vec<String>, BackendError> {
        if req.n == 0 {
            return Err(BackendError::Permanent("n must be >= 1".into()));
        }
        let rule = self.rules.iter().find(|r| r.applies(req)).ok_or_else(|| {
            BackendError::ScriptMiss(format!(
                "{:?} request, modality {}, answer {:?}, query {:?}",
                req.context.task, req.context.modality, req.context.answer, req.context.query
            ))
        })?;
        let digest = req.digest();
        let out = (0..req.n)
            .map(|i| match &rule.respond {
                Respond::Fixed(s) => s.clone(),
                Respond::Echo(t) => t
                    .replace("{answer}", req.context.answer.as_deref().unwrap_or(""))
                    .replace("{query}", req.context.query.as_deref().unwrap_or("")),
                Respond::Distribution(d) => {
                    let u = self.draw(&digest, i);
                    let mut acc = 0.0;
                    for (s, p) in d {
                        acc += p;
                        if u < acc {
                            return s.clone();
                        }
                    }
                    d.last().map(|(s, _)| s.clone()).unwrap_or_default()
                }
            })
            .collect();
        Ok(out)
    }
}

/// Digest of a rule list, for reports.
pub fn script_digest(rules: &[ScriptRule]) -> String {
    sha256_hex(&serde_json::to_vec(rules).expect("rules serialize"))
}
