//! Backward/forward cycles and their binary rewards.
//!
//! For each sample the candidate answer is turned into one question per
//! backward modality. Each question is then answered `k` times from the
//! forward modality of every selected path, and each answer earns reward 1 iff
//! it matches the candidate. A backward query is shared by the two paths that
//! start from its modality (TT/TI share the text query, IT/II the image one).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::template::clean_generation;
use crate::backend::{
    BackendError, ChatMessage, CompletionRequest, Direction, ModelClient, PromptError, RequestContext,
    TaskKind, TemplateFamily, TemplateId, TemplateRegistry,
};
use crate::datamodel::{
    validate_sample, Answer, Modality, PipelineConfig, Query, QueryOrigin, Rollout, RolloutGroup, Sample,
    SamplingParams, ValidationStage,
};
use crate::exec::Executor;
use crate::matcher::{matches, MatcherPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CycleConfig {
    /// Intra-modal cycles only.
    Single,
    /// Cross-modal cycles only.
    Cross,
    #[default]
    Mixed,
}

impl std::str::FromStr for CycleConfig {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "single" => Ok(CycleConfig::Single),
            "cross" => Ok(CycleConfig::Cross),
            "mixed" => Ok(CycleConfig::Mixed),
            other => Err(format!("unknown cycle config {other:?} (single|cross|mixed)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PathCode {
    TT,
    TI,
    IT,
    II,
}

impl fmt::Display for PathCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CyclePath {
    pub backward_modality: Modality,
    pub forward_modality: Modality,
    pub code: PathCode,
}

impl CyclePath {
    pub const TT: CyclePath = CyclePath::new(PathCode::TT);
    pub const TI: CyclePath = CyclePath::new(PathCode::TI);
    pub const IT: CyclePath = CyclePath::new(PathCode::IT);
    pub const II: CyclePath = CyclePath::new(PathCode::II);

    pub const fn new(code: PathCode) -> Self {
        let (b, f) = match code {
            PathCode::TT => (Modality::Text, Modality::Text),
            PathCode::TI => (Modality::Text, Modality::Image),
            PathCode::IT => (Modality::Image, Modality::Text),
            PathCode::II => (Modality::Image, Modality::Image),
        };
        CyclePath {
            backward_modality: b,
            forward_modality: f,
            code,
        }
    }

    pub fn from_modalities(backward: Modality, forward: Modality) -> Option<Self> {
        let code = match (backward, forward) {
            (Modality::Text, Modality::Text) => PathCode::TT,
            (Modality::Text, Modality::Image) => PathCode::TI,
            (Modality::Image, Modality::Text) => PathCode::IT,
            (Modality::Image, Modality::Image) => PathCode::II,
            _ => return None,
        };
        Some(CyclePath::new(code))
    }
}

pub fn select_paths(config: CycleConfig) -> Vec<CyclePath> {
    match config {
        CycleConfig::Single => vec![CyclePath::TT, CyclePath::II],
        CycleConfig::Cross => vec![CyclePath::TI, CyclePath::IT],
        CycleConfig::Mixed => vec![CyclePath::TT, CyclePath::TI, CyclePath::IT, CyclePath::II],
    }
}

/// One line of `cycles.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub sample_id: String,
    pub a_orig: Answer,
    pub path: CyclePath,
    pub backward_query: Query,
    pub forward_group: RolloutGroup,
    pub rewards: Vec<u8>,
    /// The forward prompt exactly as sent; the trainer scores responses
    /// against it.
    pub forward_prompt: Vec<ChatMessage>,
}

/// One line of `failures.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleFailure {
    pub sample_id: String,
    pub path: Option<PathCode>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConsistency {
    pub sample_id: String,
    /// Every reconstruction on every selected path matched the candidate.
    pub all_paths_consistent: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CycleRunOutput {
    pub records: Vec<CycleRecord>,
    pub failures: Vec<CycleFailure>,
    pub consistency: Vec<SampleConsistency>,
}

#[derive(Debug, Error)]
pub enum CycleError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("model returned an empty generation")]
    EmptyGeneration,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

fn view_for(sample: &Sample, modality: Modality) -> Result<&crate::datamodel::ModalityView, CycleError> {
    sample.view(modality).ok_or_else(|| {
        CycleError::Precondition(format!("sample {} has no {modality} view", sample.id))
    })
}

/// Generates the question that should elicit `a_orig` from the given view.
pub fn backward_infer(
    sample: &Sample,
    a_orig: &Answer,
    modality: Modality,
    sampling: &SamplingParams,
    client: &ModelClient,
    templates: &TemplateRegistry,
) -> Result<Query, CycleError> {
    if a_orig.raw.trim().is_empty() {
        return Err(CycleError::Precondition("candidate answer is empty".into()));
    }
    let view = view_for(sample, modality)?;
    let id = TemplateId::new(TemplateFamily::for_dataset(&sample.dataset_tag), Direction::Backward, modality);
    let slots: BTreeMap<String, String> = [("ANS", &a_orig.raw), ("ANSWER", &a_orig.raw)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect();
    let messages = templates.assemble(id, view, &slots)?;
    let req = CompletionRequest {
        messages,
        sampling: *sampling,
        n: 1,
        context: RequestContext {
            task: TaskKind::Backward,
            modality,
            answer: Some(a_orig.raw.clone()),
            query: None,
        },
    };
    let key = format!("{}/backward-{}", sample.id, modality.code());
    let out = client.call(&req, &key)?;
    let text = clean_generation(out.first().map(String::as_str).unwrap_or(""));
    if text.is_empty() {
        return Err(CycleError::EmptyGeneration);
    }
    Ok(Query {
        text,
        origin: QueryOrigin::Backward(modality),
    })
}

/// Text placed in the QUESTION slot: the query, plus lettered choices for
/// multiple-choice samples.
pub fn question_slot(query: &str, choices: Option<&[String]>) -> String {
    match choices {
        Some(ch) if !ch.is_empty() => {
            let mut s = format!("{query}\nChoices:");
            for (i, c) in ch.iter().enumerate() {
                s.push_str(&format!("\n({}) {c}", (b'A' + i as u8) as char));
            }
            s
        }
        _ => query.to_string(),
    }
}

/// Answers `query` `k` times from the `modality` view. `path_label` names the
/// group in record keys (`TT`, `vote-T`, ...). Returns the prompt sent and the
/// rollout group.
#[allow(clippy::too_many_arguments)]
pub fn forward_infer(
    sample: &Sample,
    query: &Query,
    modality: Modality,
    k: usize,
    sampling: &SamplingParams,
    path_label: &str,
    client: &ModelClient,
    templates: &TemplateRegistry,
    policy: &MatcherPolicy,
) -> Result<(Vec<ChatMessage>, RolloutGroup), CycleError> {
    if k == 0 {
        return Err(CycleError::Precondition("k must be >= 1".into()));
    }
    let view = view_for(sample, modality)?;
    let choices = sample.choices.as_deref();
    let id = TemplateId::new(TemplateFamily::for_dataset(&sample.dataset_tag), Direction::Forward, modality);
    let slots = BTreeMap::from([("QUESTION".to_string(), question_slot(&query.text, choices))]);
    let messages = templates.assemble(id, view, &slots)?;
    let req = CompletionRequest {
        messages,
        sampling: *sampling,
        n: k,
        context: RequestContext {
            task: TaskKind::Forward,
            modality,
            answer: None,
            query: Some(query.text.clone()),
        },
    };
    let key = format!("{}/{path_label}", sample.id);
    let out = client.call(&req, &key)?;
    if out.len() != k {
        return Err(BackendError::Permanent(format!("expected {k} completions, got {}", out.len())).into());
    }
    let rollouts = out
        .into_iter()
        .enumerate()
        .map(|(i, raw)| Rollout {
            answer: Answer::new(raw.trim(), policy, choices),
            sample_id: sample.id.clone(),
            view_modality: modality,
            query: query.clone(),
            rollout_index: i,
            sampling: *sampling,
            backend_fingerprint: client.fingerprint().to_string(),
        })
        .collect();
    Ok((req.messages, RolloutGroup::new(rollouts)))
}

pub fn cycle_rewards(
    group: &RolloutGroup,
    a_orig: &Answer,
    policy: &MatcherPolicy,
    choices: Option<&[String]>,
) -> Vec<u8> {
    group
        .rollouts
        .iter()
        .map(|r| u8::from(matches(&r.answer.raw, &a_orig.raw, policy, choices)))
        .collect()
}

struct SampleOutcome {
    records: Vec<CycleRecord>,
    failures: Vec<CycleFailure>,
    consistency: Option<SampleConsistency>,
}

/// Builds the full offline cycle dataset. Per-sample and per-path failures are
/// collected instead of aborting the run. Output is ordered by sample id, then
/// path (TT, TI, IT, II).
pub fn run_cycles(
    samples: &[Sample],
    config: &PipelineConfig,
    client: &ModelClient,
    templates: &TemplateRegistry,
    exec: &Executor,
) -> CycleRunOutput {
    let paths = select_paths(config.cycle_config);
    let outcomes = exec.map(samples, |s| cycle_sample(s, &paths, config, client, templates));
    let mut out = CycleRunOutput::default();
    for o in outcomes {
        out.records.extend(o.records);
        out.failures.extend(o.failures);
        out.consistency.extend(o.consistency);
    }
    out.records
        .sort_by(|a, b| (a.sample_id.as_str(), a.path.code).cmp(&(b.sample_id.as_str(), b.path.code)));
    out.failures
        .sort_by(|a, b| (a.sample_id.as_str(), a.path).cmp(&(b.sample_id.as_str(), b.path)));
    out.consistency.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    out
}

fn cycle_sample(
    s: &Sample,
    paths: &[CyclePath],
    config: &PipelineConfig,
    client: &ModelClient,
    templates: &TemplateRegistry,
) -> SampleOutcome {
    let fail_all = |reason: String| SampleOutcome {
        records: Vec::new(),
        failures: vec![CycleFailure {
            sample_id: s.id.clone(),
            path: None,
            reason,
        }],
        consistency: None,
    };
    let problems = validate_sample(s, ValidationStage::Prepared);
    if !problems.is_empty() {
        return fail_all(format!("sample not prepared: {}", problems.join("; ")));
    }
    let Some(candidate) = s.candidate_answer.as_deref().filter(|c| !c.trim().is_empty()) else {
        return fail_all("sample has no candidate answer".into());
    };
    let policy = &config.matcher_policy;
    let choices = s.choices.as_deref();
    let a_orig = Answer::new(candidate, policy, choices);

    let mut outcome = SampleOutcome {
        records: Vec::new(),
        failures: Vec::new(),
        consistency: None,
    };
    let mut backward: Vec<(Modality, Result<Query, String>)> = Vec::new();
    for m in [Modality::Text, Modality::Image] {
        if paths.iter().any(|p| p.backward_modality == m) {
            let q = backward_infer(s, &a_orig, m, &config.sampling, client, templates).map_err(|e| e.to_string());
            backward.push((m, q));
        }
    }
    for path in paths {
        let q = &backward
            .iter()
            .find(|(m, _)| *m == path.backward_modality)
            .expect("backward query scheduled for every path")
            .1;
        let query = match q {
            Ok(q) => q,
            Err(e) => {
                outcome.failures.push(CycleFailure {
                    sample_id: s.id.clone(),
                    path: Some(path.code),
                    reason: format!("backward: {e}"),
                });
                continue;
            }
        };
        match forward_infer(
            s,
            query,
            path.forward_modality,
            config.rollouts_per_modality,
            &config.sampling,
            &path.code.to_string(),
            client,
            templates,
            policy,
        ) {
            Ok((prompt, group)) => {
                let rewards = cycle_rewards(&group, &a_orig, policy, choices);
                outcome.records.push(CycleRecord {
                    sample_id: s.id.clone(),
                    a_orig: a_orig.clone(),
                    path: *path,
                    backward_query: query.clone(),
                    forward_group: group,
                    rewards,
                    forward_prompt: prompt,
                });
            }
            Err(e) => outcome.failures.push(CycleFailure {
                sample_id: s.id.clone(),
                path: Some(path.code),
                reason: format!("forward: {e}"),
            }),
        }
    }
    if outcome.failures.is_empty() {
        outcome.consistency = Some(SampleConsistency {
            sample_id: s.id.clone(),
            all_paths_consistent: outcome.records.iter().all(|r| r.rewards.iter().all(|&x| x == 1)),
        });
    }
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Backend, CountingBackend, MatchOn, Respond, ScriptRule, ScriptedBackend};
    use crate::datamodel::{ImageRef, ModalityView};
    use std::sync::Arc;

    fn sample(id: &str) -> Sample {
        let mut s = Sample::new(id, "chartqa");
        s.text_view = Some(ModalityView::text("{\"bars\": [1, 2]}"));
        s.image_view = Some(ModalityView::image(ImageRef::Url("https://x/c.png".into())));
        s.candidate_answer = Some("dog".into());
        s
    }

    fn client(rules: Vec<ScriptRule>) -> (ModelClient, Arc<CountingBackend<ScriptedBackend>>) {
        let b = Arc::new(CountingBackend::new(ScriptedBackend::new(rules, 1).unwrap()));
        (ModelClient::new(b.clone() as Arc<dyn Backend>), b)
    }

    fn echo_rules() -> Vec<ScriptRule> {
        vec![
            ScriptRule { match_on: MatchOn::AnswerEquals("dog".into()), modality_filter: None, respond: Respond::Fixed("\"Which animal?\"".into()) },
            ScriptRule::fixed(MatchOn::QueryContains("Which animal".into()), None, "dog"),
        ]
    }

    #[test]
    fn path_selection() {
        assert_eq!(select_paths(CycleConfig::Single), vec![CyclePath::TT, CyclePath::II]);
        assert_eq!(select_paths(CycleConfig::Cross), vec![CyclePath::TI, CyclePath::IT]);
        assert_eq!(select_paths(CycleConfig::Mixed).len(), 4);
        assert_eq!(CyclePath::from_modalities(Modality::Image, Modality::Text), Some(CyclePath::IT));
        assert_eq!(CyclePath::from_modalities(Modality::Interleaved, Modality::Text), None);
    }

    #[test]
    fn backward_strips_quotes() {
        let (c, _) = client(echo_rules());
        let a = Answer::new("dog", &MatcherPolicy::default(), None);
        let q = backward_infer(&sample("s"), &a, Modality::Image, &SamplingParams::default(), &c, &TemplateRegistry::builtin()).unwrap();
        assert_eq!(q.text, "Which animal?");
        assert_eq!(q.origin, QueryOrigin::Backward(Modality::Image));
    }

    #[test]
    fn backward_rejects_empty_answer_before_calling() {
        let (c, b) = client(echo_rules());
        let a = Answer::new("", &MatcherPolicy::default(), None);
        let r = backward_infer(&sample("s"), &a, Modality::Text, &SamplingParams::default(), &c, &TemplateRegistry::builtin());
        assert!(matches!(r, Err(CycleError::Precondition(_))));
        assert_eq!(b.calls(), 0);
    }

    #[test]
    fn backward_empty_generation() {
        let (c, _) = client(vec![ScriptRule::fixed(MatchOn::Any, None, "  \"\" ")]);
        let a = Answer::new("dog", &MatcherPolicy::default(), None);
        let r = backward_infer(&sample("s"), &a, Modality::Text, &SamplingParams::default(), &c, &TemplateRegistry::builtin());
        assert!(matches!(r, Err(CycleError::EmptyGeneration)));
    }

    #[test]
    fn forward_group_and_missing_view() {
        let (c, _) = client(vec![ScriptRule::fixed(MatchOn::Any, None, "42")]);
        let q = Query { text: "q?".into(), origin: QueryOrigin::Dataset };
        let p = MatcherPolicy::default();
        let reg = TemplateRegistry::builtin();
        let (prompt, g) = forward_infer(&sample("s"), &q, Modality::Text, 4, &SamplingParams::default(), "TT", &c, &reg, &p).unwrap();
        assert_eq!(g.k, 4);
        assert!(g.answers().all(|a| a == "42"));
        assert!(prompt[0].text().contains("q?"));
        let mut s = sample("s");
        s.image_view = None;
        let r = forward_infer(&s, &q, Modality::Image, 4, &SamplingParams::default(), "TI", &c, &reg, &p);
        assert!(matches!(r, Err(CycleError::Precondition(_))));
    }

    #[test]
    fn rewards_follow_matcher() {
        let p = MatcherPolicy::default();
        let mk = |answers: &[&str]| {
            RolloutGroup::new(crate::voting::tests_support::pool(answers, Modality::Text))
        };
        let a = Answer::new("dog", &p, None);
        assert_eq!(cycle_rewards(&mk(&["dog", "dog", "cat", "Dog"]), &a, &p, None), vec![1, 1, 0, 1]);
        assert_eq!(cycle_rewards(&mk(&["x"; 4]), &a, &p, None), vec![0; 4]);
        let a = Answer::new("100", &p, None);
        assert_eq!(cycle_rewards(&mk(&["104", "106"]), &a, &p, None), vec![1, 0]);
    }

    #[test]
    fn topology_per_config() {
        for (cfg, n) in [(CycleConfig::Single, 2), (CycleConfig::Cross, 2), (CycleConfig::Mixed, 4)] {
            let (c, b) = client(echo_rules());
            let config = PipelineConfig { cycle_config: cfg, ..Default::default() };
            let out = run_cycles(&[sample("s1")], &config, &c, &TemplateRegistry::builtin(), &Executor::sequential());
            assert!(out.failures.is_empty(), "{:?}", out.failures);
            assert_eq!(out.records.len(), n);
            // two backward calls plus one forward call per path
            assert_eq!(b.calls(), 2 + n);
            assert!(out.records.iter().all(|r| r.rewards == vec![1; 4]));
            assert!(out.consistency[0].all_paths_consistent);
        }
    }

    #[test]
    fn mixed_reuses_backward_queries() {
        let rules = vec![
            ScriptRule { match_on: MatchOn::Any, modality_filter: Some(Modality::Text), respond: Respond::Distribution(vec![("q-a".into(), 0.5), ("q-b".into(), 0.5)]) },
        ];
        let mut rules = rules;
        rules.insert(0, ScriptRule { match_on: MatchOn::AnswerEquals("dog".into()), modality_filter: None, respond: Respond::Distribution(vec![("Q1".into(), 0.5), ("Q2".into(), 0.5)]) });
        rules.push(ScriptRule::fixed(MatchOn::Any, None, "cat"));
        let (c, _) = client(rules);
        let out = run_cycles(&[sample("s1")], &PipelineConfig::default(), &c, &TemplateRegistry::builtin(), &Executor::sequential());
        let by = |code| out.records.iter().find(|r| r.path.code == code).unwrap().backward_query.text.clone();
        assert_eq!(by(PathCode::TT), by(PathCode::TI));
        assert_eq!(by(PathCode::IT), by(PathCode::II));
        let codes: Vec<_> = out.records.iter().map(|r| r.path.code).collect();
        assert_eq!(codes, vec![PathCode::TT, PathCode::TI, PathCode::IT, PathCode::II]);
    }

    #[test]
    fn failures_are_quarantined() {
        // no forward rule for image requests -> TI and II fail, TT and IT succeed
        let rules = vec![
            ScriptRule::fixed(MatchOn::AnswerEquals("dog".into()), None, "Which animal?"),
            ScriptRule::fixed(MatchOn::Any, Some(Modality::Text), "dog"),
        ];
        let (c, _) = client(rules);
        let mut unprepared = sample("s0");
        unprepared.text_view = None;
        let out = run_cycles(&[sample("s1"), unprepared], &PipelineConfig::default(), &c, &TemplateRegistry::builtin(), &Executor::bounded(4));
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.failures.len(), 3);
        assert_eq!(out.failures[0].sample_id, "s0");
        assert_eq!(out.failures[0].path, None);
        assert!(out.consistency.is_empty());
    }
}
