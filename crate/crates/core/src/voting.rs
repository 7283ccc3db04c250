//! Majority-vote pseudo-labels: the self-reward baselines.
//!
//! Ties between equally large answer clusters go to the cluster whose first
//! member appears earliest in the pool, then to the lexicographically smallest
//! normalized representative. The `tie_broken` flag records when that rule had
//! to decide. Pooled votes put text rollouts before image rollouts.

use serde::{Deserialize, Serialize};

use crate::backend::{ChatMessage, ModelClient, TemplateRegistry};
use crate::cycle::forward_infer;
use crate::datamodel::{Answer, Modality, PipelineConfig, Query, QueryOrigin, Rollout, RolloutGroup, Sample};
use crate::exec::Executor;
use crate::matcher::{equivalence_cluster, matches, normalize, MatcherPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelSource {
    TextOnly,
    ImageOnly,
    ImageText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub answer: Answer,
    pub support: usize,
    pub total: usize,
    pub tie_broken: bool,
    pub source: LabelSource,
}

/// Outcome of voting over plain strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vote {
    /// Index in the pool of the winning cluster's representative.
    pub winner: usize,
    pub support: usize,
    pub tie_broken: bool,
}

pub fn vote_answers(answers: &[impl AsRef<str>], policy: &MatcherPolicy, choices: Option<&[String]>) -> Option<Vote> {
    let clusters = equivalence_cluster(answers, policy, choices);
    let max = clusters.iter().map(|c| c.members.len()).max()?;
    let tied: Vec<_> = clusters.iter().filter(|c| c.members.len() == max).collect();
    let best = tied
        .iter()
        .min_by(|a, b| {
            a.members[0].cmp(&b.members[0]).then_with(|| {
                normalize(&a.representative, policy, choices).cmp(&normalize(&b.representative, policy, choices))
            })
        })
        .expect("at least one cluster");
    Some(Vote {
        winner: best.members[0],
        support: max,
        tie_broken: tied.len() >= 2,
    })
}

/// Panics on an empty pool.
pub fn mode_vote(pool: &[Rollout], policy: &MatcherPolicy, choices: Option<&[String]>) -> PseudoLabel {
    assert!(!pool.is_empty(), "mode_vote needs a non-empty pool");
    let answers: Vec<&str> = pool.iter().map(|r| r.answer.raw.as_str()).collect();
    let v = vote_answers(&answers, policy, choices).expect("non-empty pool");
    let has_text = pool.iter().any(|r| r.view_modality == Modality::Text);
    let has_image = pool.iter().any(|r| r.view_modality == Modality::Image);
    let source = match (has_text, has_image) {
        (true, true) => LabelSource::ImageText,
        (false, true) => LabelSource::ImageOnly,
        _ => LabelSource::TextOnly,
    };
    PseudoLabel {
        answer: Answer::new(answers[v.winner], policy, choices),
        support: v.support,
        total: pool.len(),
        tie_broken: v.tie_broken,
        source,
    }
}

/// Vote over `text_group ++ image_group`.
pub fn pooled_vote(
    text_group: &RolloutGroup,
    image_group: &RolloutGroup,
    policy: &MatcherPolicy,
    choices: Option<&[String]>,
) -> PseudoLabel {
    let pool: Vec<Rollout> = text_group
        .rollouts
        .iter()
        .chain(image_group.rollouts.iter())
        .cloned()
        .collect();
    let mut label = mode_vote(&pool, policy, choices);
    label.source = LabelSource::ImageText;
    label
}

pub fn vote_rewards(
    group: &RolloutGroup,
    label: &PseudoLabel,
    policy: &MatcherPolicy,
    choices: Option<&[String]>,
) -> Vec<u8> {
    group
        .rollouts
        .iter()
        .map(|r| u8::from(matches(&r.answer.raw, &label.answer.raw, policy, choices)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteMode {
    /// Vote over text-view rollouts only.
    Text,
    /// Pool text and image rollouts.
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotedGroup {
    pub modality: Modality,
    pub prompt: Vec<ChatMessage>,
    pub group: RolloutGroup,
    pub rewards: Vec<u8>,
}

/// One line of `votes.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub sample_id: String,
    pub mode: VoteMode,
    pub label: PseudoLabel,
    pub groups: Vec<VotedGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteFailure {
    pub sample_id: String,
    pub reason: String,
}

/// Samples rollouts for each sample's dataset question, votes, and rewards
/// every rollout against the pseudo-label.
pub fn run_votes(
    samples: &[Sample],
    mode: VoteMode,
    config: &PipelineConfig,
    client: &ModelClient,
    templates: &TemplateRegistry,
    exec: &Executor,
) -> (Vec<VoteRecord>, Vec<VoteFailure>) {
    let results = exec.map(samples, |s| vote_sample(s, mode, config, client, templates));
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (s, r) in samples.iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(reason) => failures.push(VoteFailure {
                sample_id: s.id.clone(),
                reason,
            }),
        }
    }
    records.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    (records, failures)
}

fn vote_sample(
    s: &Sample,
    mode: VoteMode,
    config: &PipelineConfig,
    client: &ModelClient,
    templates: &TemplateRegistry,
) -> Result<VoteRecord, String> {
    let question = s
        .question
        .as_deref()
        .filter(|q| !q.trim().is_empty())
        .ok_or_else(|| "sample has no dataset question".to_string())?;
    let query = Query {
        text: question.to_string(),
        origin: QueryOrigin::Dataset,
    };
    let policy = &config.matcher_policy;
    let choices = s.choices.as_deref();
    let modalities: &[Modality] = match mode {
        VoteMode::Text => &[Modality::Text],
        VoteMode::Multi => &[Modality::Text, Modality::Image],
    };
    let mut groups = Vec::new();
    for &m in modalities {
        let (prompt, group) = forward_infer(
            s,
            &query,
            m,
            config.rollouts_per_modality,
            &config.sampling,
            "vote",
            client,
            templates,
            policy,
        )
        .map_err(|e| e.to_string())?;
        groups.push((m, prompt, group));
    }
    let label = match mode {
        VoteMode::Text => mode_vote(&groups[0].2.rollouts, policy, choices),
        VoteMode::Multi => pooled_vote(&groups[0].2, &groups[1].2, policy, choices),
    };
    let groups = groups
        .into_iter()
        .map(|(modality, prompt, group)| {
            let rewards = vote_rewards(&group, &label, policy, choices);
            VotedGroup {
                modality,
                prompt,
                group,
                rewards,
            }
        })
        .collect();
    Ok(VoteRecord {
        sample_id: s.id.clone(),
        mode,
        label,
        groups,
    })
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use crate::datamodel::SamplingParams;

    pub(crate) fn pool(answers: &[&str], modality: Modality) -> Vec<Rollout> {
        let policy = MatcherPolicy::default();
        answers
            .iter()
            .enumerate()
            .map(|(i, a)| Rollout {
                answer: Answer::new(*a, &policy, None),
                sample_id: "s".into(),
                view_modality: modality,
                query: Query {
                    text: "q".into(),
                    origin: QueryOrigin::Dataset,
                },
                rollout_index: i,
                sampling: SamplingParams::default(),
                backend_fingerprint: "fp".into(),
            })
            .collect()
    }
}
