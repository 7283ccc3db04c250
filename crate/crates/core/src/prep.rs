//! Dataset ingestion, caption-based text views, candidate answers, and
//! controlled-inconsistency subsets.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    clean_generation, CompletionRequest, Direction, ModelClient, PromptError, RequestContext, TaskKind,
    TemplateFamily, TemplateId, TemplateRegistry,
};
use crate::cycle::forward_infer;
use crate::datamodel::{
    validate_sample, ImageRef, Modality, ModalityView, PipelineConfig, Query, QueryOrigin, Sample,
    SamplingParams, ValidationStage,
};
use crate::eval::EvalRow;
use crate::exec::Executor;
use crate::jsonl::{self, JsonlError};
use crate::voting::mode_vote;

pub const VWA_QUESTIONS_PER_PAGE: usize = 10;
pub const VWA_CHOICES_PER_QUESTION: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Generic,
    VwaMc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    SelfGenerated(Modality),
    TrainingSetAnswer,
}

#[derive(Debug, Error)]
pub enum PrepError {
    #[error(transparent)]
    Parse(#[from] JsonlError),
    #[error("schema violation in {ids:?}: {problems:?}")]
    SchemaViolation { ids: Vec<String>, problems: Vec<String> },
    #[error("no gold answer for {0:?}")]
    MissingGold(Vec<String>),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("model returned an empty generation")]
    EmptyGeneration,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] crate::backend::BackendError),
    #[error("rho must lie in [0, 1], got {0}")]
    InvalidRho(f64),
    #[error(
        "insufficient pool: need {need_inconsistent} inconsistent (have {have_inconsistent}) and \
         {need_consistent} consistent (have {have_consistent})"
    )]
    InsufficientPool {
        need_inconsistent: usize,
        have_inconsistent: usize,
        need_consistent: usize,
        have_consistent: usize,
    },
}

/// A sample set aside by a stage, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quarantine {
    pub sample_id: String,
    pub stage: String,
    pub reason: String,
}

#[derive(Debug, Deserialize)]
struct GenericRecord {
    id: String,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    image: Option<String>,
    #[serde(default)]
    question: Option<String>,
    #[serde(default)]
    gold_answer: Option<String>,
    #[serde(default)]
    choices: Option<Vec<String>>,
    #[serde(default)]
    dataset_tag: Option<String>,
}

#[derive(Debug, Deserialize)]
struct VwaQuestion {
    question: String,
    choices: Vec<String>,
    answer: String,
}

#[derive(Debug, Deserialize)]
struct VwaPage {
    page_id: String,
    image: String,
    #[serde(default)]
    text: Option<String>,
    questions: Vec<VwaQuestion>,
}

fn resolve_image(raw: &str, base: &Path) -> ImageRef {
    match ImageRef::parse(raw) {
        ImageRef::Path(p) if Path::new(&p).is_relative() => {
            ImageRef::Path(base.join(&p).to_string_lossy().into_owned())
        }
        other => other,
    }
}

/// Reads a line-delimited dataset. Relative image paths resolve against the
/// dataset file's directory. Every sample must pass ingest validation.
pub fn ingest(path: &Path, format: DatasetFormat) -> Result<Vec<Sample>, PrepError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    let mut bad_ids = Vec::new();
    let mut problems = Vec::new();
    match format {
        DatasetFormat::Generic => {
            for r in jsonl::read::<GenericRecord>(path)? {
                let mut s = Sample::new(r.id, r.dataset_tag.unwrap_or_else(|| "generic".into()));
                s.text_view = r.text.map(ModalityView::text);
                s.image_view = r.image.map(|i| ModalityView::image(resolve_image(&i, base)));
                s.question = r.question;
                s.gold_answer = r.gold_answer;
                s.choices = r.choices;
                samples.push(s);
            }
        }
        DatasetFormat::VwaMc => {
            for page in jsonl::read::<VwaPage>(path)? {
                if page.questions.len() != VWA_QUESTIONS_PER_PAGE {
                    bad_ids.push(page.page_id.clone());
                    problems.push(format!(
                        "page {}: {} questions, expected {VWA_QUESTIONS_PER_PAGE}",
                        page.page_id,
                        page.questions.len()
                    ));
                }
                let image = resolve_image(&page.image, base);
                for (i, q) in page.questions.into_iter().enumerate() {
                    let id = format!("{}-q{i}", page.page_id);
                    if q.choices.len() != VWA_CHOICES_PER_QUESTION {
                        bad_ids.push(id.clone());
                        problems.push(format!(
                            "{id}: {} choices, expected {VWA_CHOICES_PER_QUESTION}",
                            q.choices.len()
                        ));
                    }
                    let mut s = Sample::new(id, "vwa");
                    s.text_view = page.text.clone().map(ModalityView::text);
                    s.image_view = Some(ModalityView::image(image.clone()));
                    s.question = Some(q.question);
                    s.gold_answer = Some(q.answer);
                    s.choices = Some(q.choices);
                    s.meta.insert("page_id".into(), page.page_id.clone());
                    samples.push(s);
                }
            }
        }
    }
    let mut seen = std::collections::HashSet::new();
    for s in &samples {
        if !seen.insert(s.id.as_str()) {
            bad_ids.push(s.id.clone());
            problems.push(format!("{}: duplicate id", s.id));
        }
        for p in validate_sample(s, ValidationStage::Ingest) {
            bad_ids.push(s.id.clone());
            problems.push(format!("{}: {p}", s.id));
        }
    }
    if !bad_ids.is_empty() {
        bad_ids.dedup();
        return Err(PrepError::SchemaViolation { ids: bad_ids, problems });
    }
    Ok(samples)
}

/// Fills a missing text view with the model's description of the image.
pub fn synthesize_text_view(
    sample: &Sample,
    sampling: &SamplingParams,
    client: &ModelClient,
    templates: &TemplateRegistry,
) -> Result<Sample, PrepError> {
    if sample.text_view.is_some() {
        return Err(PrepError::Precondition(format!("sample {} already has a text view", sample.id)));
    }
    let view = sample
        .image_view
        .as_ref()
        .ok_or_else(|| PrepError::Precondition(format!("sample {} has no image view", sample.id)))?;
    let family = TemplateFamily::for_dataset(&sample.dataset_tag);
    let messages = templates.assemble(
        TemplateId::new(family, Direction::Caption, Modality::Image),
        view,
        &BTreeMap::new(),
    )?;
    let req = CompletionRequest {
        messages,
        sampling: *sampling,
        n: 1,
        context: RequestContext {
            task: TaskKind::Caption,
            modality: Modality::Image,
            answer: None,
            query: None,
        },
    };
    let out = client.call(&req, &format!("{}/caption", sample.id))?;
    let text = clean_generation(out.first().map(String::as_str).unwrap_or(""));
    if text.is_empty() {
        return Err(PrepError::EmptyGeneration);
    }
    let mut s = sample.clone();
    s.text_view = Some(ModalityView::text(text));
    s.meta.insert("text_view_source".into(), "caption".into());
    s.meta.insert("caption_backend".into(), client.fingerprint().to_string());
    Ok(s)
}

/// Captions every sample that lacks a text view. Returns the samples that
/// came through (in input order) and the quarantined ones.
pub fn synthesize_missing(
    samples: &[Sample],
    sampling: &SamplingParams,
    client: &ModelClient,
    templates: &TemplateRegistry,
    exec: &Executor,
) -> (Vec<Sample>, Vec<Quarantine>) {
    let results = exec.map(samples, |s| {
        if s.text_view.is_some() {
            Ok(s.clone())
        } else {
            synthesize_text_view(s, sampling, client, templates)
        }
    });
    split(samples, results, "caption")
}

fn split(
    samples: &[Sample],
    results: Vec<Result<Sample, PrepError>>,
    stage: &str,
) -> (Vec<Sample>, Vec<Quarantine>) {
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for (s, r) in samples.iter().zip(results) {
        match r {
            Ok(s) => ok.push(s),
            Err(e) => bad.push(Quarantine {
                sample_id: s.id.clone(),
                stage: stage.to_string(),
                reason: e.to_string(),
            }),
        }
    }
    (ok, bad)
}

fn self_generated(
    s: &Sample,
    modality: Modality,
    config: &PipelineConfig,
    client: &ModelClient,
    templates: &TemplateRegistry,
) -> Result<Sample, PrepError> {
    let question = s
        .question
        .as_deref()
        .filter(|q| !q.trim().is_empty())
        .ok_or_else(|| PrepError::Precondition(format!("sample {} has no dataset question", s.id)))?;
    let query = Query {
        text: question.to_string(),
        origin: QueryOrigin::Dataset,
    };
    let sampling = if config.k_init == 1 {
        config.sampling.greedy()
    } else {
        config.sampling
    };
    let label = format!("init-{}", modality.code());
    let (_, group) = forward_infer(
        s,
        &query,
        modality,
        config.k_init,
        &sampling,
        &label,
        client,
        templates,
        &config.matcher_policy,
    )
    .map_err(|e| match e {
        crate::cycle::CycleError::Backend(b) => PrepError::Backend(b),
        crate::cycle::CycleError::Prompt(p) => PrepError::Prompt(p),
        other => PrepError::Precondition(other.to_string()),
    })?;
    let label = mode_vote(&group.rollouts, &config.matcher_policy, s.choices.as_deref());
    if label.answer.raw.trim().is_empty() {
        return Err(PrepError::EmptyGeneration);
    }
    let mut out = s.clone();
    out.candidate_answer = Some(label.answer.raw);
    out.meta.insert("candidate_source".into(), format!("self_generated_{}", modality.code()));
    Ok(out)
}

/// Sets `candidate_answer` on every sample. The training-set source copies
/// the gold answer and fails outright if any sample lacks one; self-generated
/// candidates are the mode of `k_init` rollouts (one greedy rollout when
/// `k_init` is 1) and failing samples are quarantined.
pub fn select_candidates(
    samples: &[Sample],
    source: CandidateSource,
    config: &PipelineConfig,
    client: &ModelClient,
    templates: &TemplateRegistry,
    exec: &Executor,
) -> Result<(Vec<Sample>, Vec<Quarantine>), PrepError> {
    match source {
        CandidateSource::TrainingSetAnswer => {
            let missing: Vec<String> = samples
                .iter()
                .filter(|s| s.gold_answer.as_deref().is_none_or(|g| g.trim().is_empty()))
                .map(|s| s.id.clone())
                .collect();
            if !missing.is_empty() {
                return Err(PrepError::MissingGold(missing));
            }
            let out = samples
                .iter()
                .map(|s| {
                    let mut s = s.clone();
                    s.candidate_answer = s.gold_answer.clone();
                    s.meta.insert("candidate_source".into(), "training_set".into());
                    s
                })
                .collect();
            Ok((out, Vec::new()))
        }
        CandidateSource::SelfGenerated(m) => {
            let results = exec.map(samples, |s| self_generated(s, m, config, client, templates));
            Ok(split(samples, results, "candidate"))
        }
    }
}

/// `ceil(rho * n)`, robust to the float error in products like `0.1 * 3200`.
pub fn inconsistent_count(rho: f64, n: usize) -> usize {
    ((rho * n as f64) - 1e-9).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub rho: f64,
    pub n: usize,
    pub seed: u64,
    pub inconsistent: usize,
    pub consistent: usize,
    pub available_inconsistent: usize,
    pub available_consistent: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subset {
    /// Sorted.
    pub ids: Vec<String>,
    pub inconsistent_ids: Vec<String>,
    pub report: SubsetReport,
}

fn draw(pool: &mut Vec<&str>, amount: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    pool.sort_unstable();
    rand::seq::index::sample(rng, pool.len(), amount)
        .into_iter()
        .map(|i| pool[i].to_string())
        .collect()
}

/// Draws `n` ids, exactly `ceil(rho * n)` of them from rows whose modality
/// predictions disagree, uniformly without replacement. Rows without an
/// agreement flag are ignored.
pub fn build_inconsistency_subset(rows: &[EvalRow], rho: f64, n: usize, seed: u64) -> Result<Subset, PrepError> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(PrepError::InvalidRho(rho));
    }
    let mut bad: Vec<&str> = rows.iter().filter(|r| r.agree == Some(false)).map(|r| r.sample_id.as_str()).collect();
    let mut good: Vec<&str> = rows.iter().filter(|r| r.agree == Some(true)).map(|r| r.sample_id.as_str()).collect();
    let need_bad = inconsistent_count(rho, n).min(n);
    let need_good = n - need_bad;
    if bad.len() < need_bad || good.len() < need_good {
        return Err(PrepError::InsufficientPool {
            need_inconsistent: need_bad,
            have_inconsistent: bad.len(),
            need_consistent: need_good,
            have_consistent: good.len(),
        });
    }
    let report = SubsetReport {
        rho,
        n,
        seed,
        inconsistent: need_bad,
        consistent: need_good,
        available_inconsistent: bad.len(),
        available_consistent: good.len(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inconsistent_ids = draw(&mut bad, need_bad, &mut rng);
    let consistent_ids = draw(&mut good, need_good, &mut rng);
    inconsistent_ids.sort();
    let mut ids: Vec<String> = inconsistent_ids.iter().cloned().chain(consistent_ids).collect();
    ids.sort();
    Ok(Subset {
        ids,
        inconsistent_ids,
        report,
    })
}
