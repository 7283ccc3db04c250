//! Shared domain types.
//!
//! Every record here is an immutable value object with a canonical
//! line-delimited JSON form; field declaration order is the on-disk key order.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cycle::CycleConfig;
use crate::matcher::MatcherPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Image,
    /// Accepted on ingest, never scheduled into a cycle path.
    Interleaved,
}

impl Modality {
    pub fn code(self) -> char {
        match self {
            Modality::Text => 'T',
            Modality::Image => 'I',
            Modality::Interleaved => 'M',
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Interleaved => "interleaved",
        };
        f.write_str(s)
    }
}

/// Where an image lives. Base64 blobs are only produced at wire-assembly time
/// for path references; records normally carry paths or URLs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRef {
    Path(String),
    Url(String),
    Base64 { media_type: String, data: String },
}

impl ImageRef {
    /// Parses the string form used in dataset files: `http(s)://...`,
    /// `data:<type>;base64,<blob>`, or a filesystem path.
    pub fn parse(s: &str) -> ImageRef {
        if s.starts_with("http://") || s.starts_with("https://") {
            return ImageRef::Url(s.to_string());
        }
        if let Some(rest) = s.strip_prefix("data:") {
            if let Some((media_type, data)) = rest.split_once(";base64,") {
                return ImageRef::Base64 {
                    media_type: media_type.to_string(),
                    data: data.to_string(),
                };
            }
        }
        ImageRef::Path(s.to_string())
    }

    pub fn is_resolvable(&self) -> bool {
        match self {
            ImageRef::Path(p) => !p.is_empty() && Path::new(p).is_file(),
            ImageRef::Url(u) => u.starts_with("http://") || u.starts_with("https://"),
            ImageRef::Base64 { media_type, data } => {
                media_type.starts_with("image/") && !data.is_empty()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewPayload {
    Text(String),
    Image(ImageRef),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityView {
    pub modality: Modality,
    pub payload: ViewPayload,
}

impl ModalityView {
    pub fn text(s: impl Into<String>) -> Self {
        ModalityView {
            modality: Modality::Text,
            payload: ViewPayload::Text(s.into()),
        }
    }

    pub fn image(r: ImageRef) -> Self {
        ModalityView {
            modality: Modality::Image,
            payload: ViewPayload::Image(r),
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match &self.payload {
            ViewPayload::Text(s) => Some(s),
            ViewPayload::Image(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub text_view: Option<ModalityView>,
    pub image_view: Option<ModalityView>,
    pub gold_answer: Option<String>,
    pub choices: Option<Vec<String>>,
    pub candidate_answer: Option<String>,
    pub dataset_tag: String,
    /// The dataset's own task question, used for evaluation and
    /// self-generated candidates. Never used as paired supervision.
    #[serde(default)]
    pub question: Option<String>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Sample {
    pub fn new(id: impl Into<String>, dataset_tag: impl Into<String>) -> Self {
        Sample {
            id: id.into(),
            text_view: None,
            image_view: None,
            gold_answer: None,
            choices: None,
            candidate_answer: None,
            dataset_tag: dataset_tag.into(),
            question: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn view(&self, modality: Modality) -> Option<&ModalityView> {
        match modality {
            Modality::Text => self.text_view.as_ref(),
            Modality::Image => self.image_view.as_ref(),
            Modality::Interleaved => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryOrigin {
    Dataset,
    Backward(Modality),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    pub origin: QueryOrigin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub raw: String,
    pub normalized: String,
}

impl Answer {
    pub fn new(raw: impl Into<String>, policy: &MatcherPolicy, choices: Option<&[String]>) -> Self {
        let raw = raw.into();
        let normalized = crate::matcher::normalize(&raw, policy, choices);
        Answer { raw, normalized }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 1.0,
            top_p: 0.95,
            max_tokens: 256,
            seed: None,
        }
    }
}

impl SamplingParams {
    pub fn greedy(&self) -> SamplingParams {
        SamplingParams {
            temperature: 0.0,
            ..*self
        }
    }

    pub fn is_valid(&self) -> bool {
        self.temperature >= 0.0 && self.top_p > 0.0 && self.top_p <= 1.0 && self.max_tokens > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub answer: Answer,
    pub sample_id: String,
    pub view_modality: Modality,
    pub query: Query,
    pub rollout_index: usize,
    pub sampling: SamplingParams,
    pub backend_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub rollouts: Vec<Rollout>,
    pub k: usize,
}

impl RolloutGroup {
    pub fn new(rollouts: Vec<Rollout>) -> Self {
        let k = rollouts.len();
        RolloutGroup { rollouts, k }
    }

    pub fn answers(&self) -> impl Iterator<Item = &str> {
        self.rollouts.iter().map(|r| r.answer.raw.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub rollouts_per_modality: usize,
    pub batch_size: usize,
    /// Export-only.
    pub learning_rate: f64,
    /// Export-only.
    pub weight_decay: f64,
    /// Export-only.
    pub kl_coefficient: f64,
    /// Export-only.
    pub max_steps: u32,
    pub cycle_config: CycleConfig,
    pub matcher_policy: MatcherPolicy,
    pub concurrency_limit: usize,
    pub retry_max: u32,
    pub sampling: SamplingParams,
    pub seed: u64,
    /// Rollouts drawn per sample for self-generated candidates.
    pub k_init: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            rollouts_per_modality: 4,
            batch_size: 256,
            learning_rate: 1e-6,
            weight_decay: 1e-2,
            kl_coefficient: 1e-2,
            max_steps: 100,
            cycle_config: CycleConfig::Mixed,
            matcher_policy: MatcherPolicy::default(),
            concurrency_limit: 8,
            retry_max: 3,
            sampling: SamplingParams::default(),
            seed: 0,
            k_init: 1,
        }
    }
}

impl PipelineConfig {
    /// Returns a list of problems; empty when the config is usable.
    pub fn validate(&self, allow_custom_batch: bool) -> Vec<String> {
        let mut out = Vec::new();
        if self.rollouts_per_modality == 0 {
            out.push("rollouts_per_modality must be >= 1".to_string());
        }
        if !allow_custom_batch && !matches!(self.batch_size, 256 | 1024) {
            out.push(format!("batch_size {} not in {{256, 1024}}", self.batch_size));
        }
        if self.batch_size == 0 {
            out.push("batch_size must be positive".to_string());
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("kl_coefficient", self.kl_coefficient),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                out.push(format!("{name} must be positive"));
            }
        }
        if self.concurrency_limit == 0 {
            out.push("concurrency_limit must be >= 1".to_string());
        }
        if self.k_init == 0 {
            out.push("k_init must be >= 1".to_string());
        }
        if !self.sampling.is_valid() {
            out.push("sampling params out of range".to_string());
        }
        if let crate::matcher::NumericMode::Relative { tolerance } = self.matcher_policy.numeric_mode {
            if tolerance.is_nan() || tolerance < 0.0 {
                out.push("numeric tolerance must be >= 0".to_string());
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationStage {
    Ingest,
    Prepared,
}

/// Checks a sample against the invariants for `stage`. Never fails; an empty
/// list means the sample is valid.
pub fn validate_sample(s: &Sample, stage: ValidationStage) -> Vec<String> {
    let mut v = Vec::new();
    if s.id.is_empty() {
        v.push("id is empty".to_string());
    }
    if s.id.contains('/') {
        v.push(format!("id {:?} contains '/'", s.id));
    }
    match &s.text_view {
        Some(view) => match &view.payload {
            ViewPayload::Text(t) if view.modality == Modality::Text => {
                if t.trim().is_empty() {
                    v.push("text_view payload is empty".to_string());
                }
            }
            _ => v.push("text_view is not a text payload".to_string()),
        },
        None if stage == ValidationStage::Prepared => {
            v.push("text_view is missing".to_string());
        }
        None => {}
    }
    match &s.image_view {
        Some(view) => match &view.payload {
            ViewPayload::Image(r) if view.modality == Modality::Image => {
                if !r.is_resolvable() {
                    v.push(format!("image_view reference {r:?} is not resolvable"));
                }
            }
            _ => v.push("image_view is not an image payload".to_string()),
        },
        None => {
            if stage == ValidationStage::Prepared || s.text_view.is_none() {
                v.push("image_view is missing".to_string());
            }
        }
    }
    if let Some(choices) = &s.choices {
        if choices.is_empty() {
            v.push("choices is present but empty".to_string());
        } else if let Some(gold) = &s.gold_answer {
            let hits = choices.iter().filter(|c| *c == gold).count();
            if hits != 1 {
                v.push(format!(
                    "gold_answer {gold:?} must equal exactly one choice (found {hits})"
                ));
            }
        }
    }
    v
}

/// `<sample_id>/<path>/<index>`.
pub fn stable_record_id(sample_id: &str, path: &str, rollout_index: usize) -> String {
    format!("{sample_id}/{path}/{rollout_index}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_sample() -> Sample {
        let mut s = Sample::new("s1", "vwa");
        s.text_view = Some(ModalityView::text("page text"));
        s.image_view = Some(ModalityView::image(ImageRef::Url(
            "https://example.com/p.png".into(),
        )));
        s.choices = Some(["a", "b", "c", "d", "e", "f"].map(String::from).to_vec());
        s.gold_answer = Some("c".into());
        s
    }

    #[test]
    fn prepared_sample_passes() {
        assert!(validate_sample(&full_sample(), ValidationStage::Prepared).is_empty());
    }

    #[test]
    fn missing_text_view_only_fails_prepared() {
        let mut s = full_sample();
        s.text_view = None;
        assert!(validate_sample(&s, ValidationStage::Ingest).is_empty());
        let v = validate_sample(&s, ValidationStage::Prepared);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("text_view"));
    }

    #[test]
    fn gold_outside_choices() {
        let mut s = full_sample();
        s.choices = Some(vec!["A".into(), "B".into()]);
        s.gold_answer = Some("C".into());
        for stage in [ValidationStage::Ingest, ValidationStage::Prepared] {
            let v = validate_sample(&s, stage);
            assert_eq!(v.len(), 1, "{v:?}");
            assert!(v[0].contains("gold_answer"));
        }
    }

    #[test]
    fn slash_in_id_rejected() {
        let mut s = full_sample();
        s.id = "a/b".into();
        assert_eq!(validate_sample(&s, ValidationStage::Ingest).len(), 1);
    }

    #[test]
    fn record_id_format() {
        assert_eq!(stable_record_id("s1", "TI", 0), "s1/TI/0");
        assert_eq!(stable_record_id("s1", "TI", 3), "s1/TI/3");
        assert_eq!(
            stable_record_id("s1", "TI", 3),
            stable_record_id("s1", "TI", 3)
        );
    }

    #[test]
    fn image_ref_parse() {
        assert_eq!(
            ImageRef::parse("data:image/png;base64,AAAA"),
            ImageRef::Base64 {
                media_type: "image/png".into(),
                data: "AAAA".into()
            }
        );
        assert!(matches!(ImageRef::parse("https://x/y.png"), ImageRef::Url(_)));
        assert!(matches!(ImageRef::parse("imgs/a.png"), ImageRef::Path(_)));
    }

    #[test]
    fn config_defaults_validate() {
        assert!(PipelineConfig::default().validate(false).is_empty());
        let c = PipelineConfig {
            batch_size: 100,
            ..PipelineConfig::default()
        };
        assert_eq!(c.validate(false).len(), 1);
        assert!(c.validate(true).is_empty());
    }
}
