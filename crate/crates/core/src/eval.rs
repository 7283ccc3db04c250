//! Per-modality accuracy, cross-modal consistency ratio, and run reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{ModelClient, TemplateRegistry};
use crate::cycle::{forward_infer, CycleError, CycleRecord};
use crate::datamodel::{
    validate_sample, Answer, Modality, PipelineConfig, Query, QueryOrigin, Sample, ValidationStage,
};
use crate::exec::Executor;
use crate::matcher::{matches, MatcherPolicy};
use crate::voting::VoteRecord;

/// One line of `eval.jsonl`. `agree` is set iff both predictions are present;
/// the `*_correct` fields iff gold and that prediction are present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sample_id: String,
    pub dataset_tag: String,
    pub text_pred: Option<Answer>,
    pub image_pred: Option<Answer>,
    pub gold: Option<Answer>,
    pub text_correct: Option<bool>,
    pub image_correct: Option<bool>,
    pub agree: Option<bool>,
}

impl EvalRow {
    pub fn from_predictions(
        sample_id: &str,
        dataset_tag: &str,
        text_pred: Option<&str>,
        image_pred: Option<&str>,
        gold: Option<&str>,
        policy: &MatcherPolicy,
        choices: Option<&[String]>,
    ) -> EvalRow {
        let ans = |s: Option<&str>| s.map(|s| Answer::new(s, policy, choices));
        let m = |a: Option<&str>, b: Option<&str>| match (a, b) {
            (Some(a), Some(b)) => Some(matches(a, b, policy, choices)),
            _ => None,
        };
        EvalRow {
            sample_id: sample_id.to_string(),
            dataset_tag: dataset_tag.to_string(),
            text_pred: ans(text_pred),
            image_pred: ans(image_pred),
            gold: ans(gold),
            text_correct: m(text_pred, gold),
            image_correct: m(image_pred, gold),
            agree: m(text_pred, image_pred),
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no rows with the required fields")]
    EmptyEval,
    #[error("sample {0} has no dataset question")]
    MissingQuestion(String),
    #[error("sample not prepared: {0}")]
    NotPrepared(String),
    #[error(transparent)]
    Cycle(#[from] CycleError),
}

/// A ratio together with its counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub hits: usize,
    pub total: usize,
}

impl Metric {
    fn from_flags(flags: impl Iterator<Item = bool>) -> Result<Metric, EvalError> {
        let (mut hits, mut total) = (0, 0);
        for f in flags {
            total += 1;
            hits += usize::from(f);
        }
        if total == 0 {
            return Err(EvalError::EmptyEval);
        }
        Ok(Metric {
            value: hits as f64 / total as f64,
            hits,
            total,
        })
    }
}

/// One greedy prediction per modality for the sample's dataset question.
pub fn predict_both(
    sample: &Sample,
    config: &PipelineConfig,
    client: &ModelClient,
    templates: &TemplateRegistry,
) -> Result<EvalRow, EvalError> {
    let problems = validate_sample(sample, ValidationStage::Prepared);
    if !problems.is_empty() {
        return Err(EvalError::NotPrepared(problems.join("; ")));
    }
    let question = sample
        .question
        .as_deref()
        .filter(|q| !q.trim().is_empty())
        .ok_or_else(|| EvalError::MissingQuestion(sample.id.clone()))?;
    let query = Query {
        text: question.to_string(),
        origin: QueryOrigin::Dataset,
    };
    let sampling = config.sampling.greedy();
    let policy = &config.matcher_policy;
    let mut preds = Vec::with_capacity(2);
    for m in [Modality::Text, Modality::Image] {
        let label = format!("eval-{}", m.code());
        let (_, group) = forward_infer(sample, &query, m, 1, &sampling, &label, client, templates, policy)?;
        preds.push(group.rollouts[0].answer.raw.clone());
    }
    Ok(EvalRow::from_predictions(
        &sample.id,
        &sample.dataset_tag,
        Some(&preds[0]),
        Some(&preds[1]),
        sample.gold_answer.as_deref(),
        policy,
        sample.choices.as_deref(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFailure {
    pub sample_id: String,
    pub reason: String,
}

/// Rows sorted by sample id; failed samples are quarantined.
pub fn run_eval(
    samples: &[Sample],
    config: &PipelineConfig,
    client: &ModelClient,
    templates: &TemplateRegistry,
    exec: &Executor,
) -> (Vec<EvalRow>, Vec<EvalFailure>) {
    let results = exec.map(samples, |s| predict_both(s, config, client, templates));
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (s, r) in samples.iter().zip(results) {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => failures.push(EvalFailure {
                sample_id: s.id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    rows.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    (rows, failures)
}

pub fn consistency_ratio(rows: &[EvalRow]) -> Result<Metric, EvalError> {
    Metric::from_flags(rows.iter().filter_map(|r| r.agree))
}

pub fn accuracy(rows: &[EvalRow], modality: Modality) -> Result<Metric, EvalError> {
    Metric::from_flags(rows.iter().filter_map(|r| match modality {
        Modality::Text => r.text_correct,
        Modality::Image => r.image_correct,
        Modality::Interleaved => None,
    }))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VoteStats {
    pub records: usize,
    pub tie_broken: usize,
}

pub fn vote_stats(records: &[VoteRecord]) -> VoteStats {
    VoteStats {
        records: records.len(),
        tie_broken: records.iter().filter(|r| r.label.tie_broken).count(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PathStats {
    pub groups: usize,
    pub rollouts: usize,
    pub rewarded: usize,
    /// Groups whose rewards are all 1.
    pub consistent_groups: usize,
}

/// Keyed by path code.
pub fn cycle_stats(records: &[CycleRecord]) -> BTreeMap<String, PathStats> {
    let mut out: BTreeMap<String, PathStats> = BTreeMap::new();
    for r in records {
        let e = out.entry(r.path.code.to_string()).or_default();
        e.groups += 1;
        e.rollouts += r.rewards.len();
        e.rewarded += r.rewards.iter().filter(|&&x| x == 1).count();
        e.consistent_groups += usize::from(r.rewards.iter().all(|&x| x == 1));
    }
    out
}

/// Context printed at the top of a report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub run_id: String,
    pub backend_fingerprint: String,
    pub matcher: String,
    pub votes: Option<VoteStats>,
    pub cycles: Option<BTreeMap<String, PathStats>>,
}

fn cell(m: Result<Metric, EvalError>) -> String {
    match m {
        Ok(m) => format!("{:.3} ({}/{})", m.value, m.hits, m.total),
        Err(_) => "n/a (0/0)".to_string(),
    }
}

fn ratio(num: usize, den: usize) -> String {
    if den == 0 {
        "n/a (0/0)".to_string()
    } else {
        format!("{:.3} ({num}/{den})", num as f64 / den as f64)
    }
}

/// Deterministic markdown report.
pub fn render_report(rows: &[EvalRow], meta: &ReportMeta) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Evaluation report\n");
    let _ = writeln!(s, "- run: {}", meta.run_id);
    let _ = writeln!(s, "- backend: {}", meta.backend_fingerprint);
    let _ = writeln!(s, "- matcher: {}", meta.matcher);
    let _ = writeln!(s, "- rows: {}\n", rows.len());

    let _ = writeln!(s, "## Accuracy and consistency\n");
    let _ = writeln!(s, "| dataset | text acc | vision acc | consistency ratio |");
    let _ = writeln!(s, "|---|---|---|---|");
    if rows.is_empty() {
        let _ = writeln!(s, "| no data | - | - | - |");
    } else {
        let mut by_tag: BTreeMap<&str, Vec<&EvalRow>> = BTreeMap::new();
        for r in rows {
            by_tag.entry(r.dataset_tag.as_str()).or_default().push(r);
        }
        let mut line = |name: &str, rs: Vec<EvalRow>| {
            let _ = writeln!(
                s,
                "| {name} | {} | {} | {} |",
                cell(accuracy(&rs, Modality::Text)),
                cell(accuracy(&rs, Modality::Image)),
                cell(consistency_ratio(&rs)),
            );
        };
        for (tag, rs) in &by_tag {
            line(tag, rs.iter().map(|r| (*r).clone()).collect());
        }
        if by_tag.len() > 1 {
            line("all", rows.to_vec());
        }
    }

    let _ = writeln!(s, "\n## Voting\n");
    let _ = writeln!(s, "| records | tie_broken rate |");
    let _ = writeln!(s, "|---|---|");
    match &meta.votes {
        Some(v) if v.records > 0 => {
            let _ = writeln!(s, "| {} | {} |", v.records, ratio(v.tie_broken, v.records));
        }
        _ => {
            let _ = writeln!(s, "| no data | - |");
        }
    }

    let _ = writeln!(s, "\n## Cycle rewards\n");
    let _ = writeln!(s, "| path | groups | mean reward | consistent groups |");
    let _ = writeln!(s, "|---|---|---|---|");
    match &meta.cycles {
        Some(c) if !c.is_empty() => {
            for (code, p) in c {
                let _ = writeln!(
                    s,
                    "| {code} | {} | {} | {} |",
                    p.groups,
                    ratio(p.rewarded, p.rollouts),
                    ratio(p.consistent_groups, p.groups)
                );
            }
        }
        _ => {
            let _ = writeln!(s, "| no data | - | - | - |");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MatchOn, ModelClient, ScriptRule, ScriptedBackend};
    use crate::datamodel::{ImageRef, ModalityView};
    use std::sync::Arc;

    fn p() -> MatcherPolicy {
        MatcherPolicy::default()
    }

    fn row(id: &str, t: Option<&str>, i: Option<&str>, g: Option<&str>) -> EvalRow {
        EvalRow::from_predictions(id, "docvqa", t, i, g, &p(), None)
    }

    #[test]
    fn row_fields() {
        let r = row("a", Some("A"), Some("B"), Some("A"));
        assert_eq!((r.text_correct, r.image_correct, r.agree), (Some(true), Some(false), Some(false)));
        let r = row("a", Some("A"), Some("A"), None);
        assert_eq!((r.text_correct, r.image_correct, r.agree), (None, None, Some(true)));
        let r = row("a", Some("A"), None, Some("A"));
        assert_eq!(r.agree, None);
        let r = row("a", Some("104"), Some("1"), Some("100"));
        assert_eq!(r.text_correct, Some(true));
    }

    #[test]
    fn ratios() {
        let flags = [true, true, true, false];
        let rows: Vec<EvalRow> = flags
            .iter()
            .enumerate()
            .map(|(i, &f)| row(&i.to_string(), Some("A"), Some(if f { "A" } else { "B" }), Some("A")))
            .collect();
        let c = consistency_ratio(&rows).unwrap();
        assert_eq!((c.value, c.hits, c.total), (0.75, 3, 4));
        assert_eq!(accuracy(&rows, Modality::Image).unwrap().value, 0.75);
        assert_eq!(accuracy(&rows, Modality::Text).unwrap().value, 1.0);
        let nogold = vec![row("x", Some("A"), Some("A"), None)];
        assert!(matches!(accuracy(&nogold, Modality::Text), Err(EvalError::EmptyEval)));
        assert!(matches!(consistency_ratio(&[]), Err(EvalError::EmptyEval)));
    }

    #[test]
    fn predict_both_greedy() {
        let backend = ScriptedBackend::new(
            vec![
                ScriptRule::fixed(MatchOn::Any, Some(Modality::Text), "A"),
                ScriptRule::fixed(MatchOn::Any, Some(Modality::Image), "B"),
            ],
            0,
        )
        .unwrap();
        let client = ModelClient::new(Arc::new(backend));
        let mut s = Sample::new("s1", "chartqa");
        s.text_view = Some(ModalityView::text("chart text"));
        s.image_view = Some(ModalityView::image(ImageRef::Url("https://example.org/c.png".into())));
        s.question = Some("Which?".into());
        s.gold_answer = Some("A".into());
        let cfg = PipelineConfig::default();
        let r = predict_both(&s, &cfg, &client, &TemplateRegistry::builtin()).unwrap();
        assert_eq!((r.text_correct, r.image_correct, r.agree), (Some(true), Some(false), Some(false)));
        s.question = None;
        assert!(matches!(
            predict_both(&s, &cfg, &client, &TemplateRegistry::builtin()),
            Err(EvalError::MissingQuestion(_))
        ));
    }

    #[test]
    fn empty_report_has_no_data_rows() {
        let r = render_report(&[], &ReportMeta::default());
        assert_eq!(r.matches("| no data |").count(), 3);
    }
}
