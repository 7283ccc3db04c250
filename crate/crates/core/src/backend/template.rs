//! Prompt templates for backward query generation, cycle verification and
//! captioning.
//!
//! The DocVQA/InfoVQA and ChartQA families reproduce the published template
//! wording. The `Generic` family (ScienceQA, MathVista, A-OKVQA, VWA and any
//! unknown tag) and every captioning prompt are authored in the same style and
//! flagged `published: false`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ChatMessage, Part, Role};
use crate::datamodel::{Modality, ModalityView, ViewPayload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateFamily {
    /// DocVQA and InfoVQA.
    DocVqa,
    ChartQa,
    Generic,
}

impl TemplateFamily {
    pub fn for_dataset(tag: &str) -> TemplateFamily {
        let t = tag.to_ascii_lowercase();
        if t.contains("docvqa") || t.contains("infovqa") {
            TemplateFamily::DocVqa
        } else if t.contains("chartqa") {
            TemplateFamily::ChartQa
        } else {
            TemplateFamily::Generic
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Answer + observation -> question.
    Backward,
    /// Question + observation -> answer.
    Forward,
    /// Image -> text description.
    Caption,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TemplateId {
    pub family: TemplateFamily,
    pub direction: Direction,
    /// Modality of the observation the template embeds.
    pub modality: Modality,
}

impl TemplateId {
    pub fn new(family: TemplateFamily, direction: Direction, modality: Modality) -> Self {
        TemplateId {
            family,
            direction,
            modality,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Seg {
    Lit(&'static str),
    Slot(&'static str),
    Obs,
}

#[derive(Debug, Clone)]
struct MessageTemplate {
    role: Role,
    segs: Vec<Seg>,
}

#[derive(Debug, Clone)]
pub struct Template {
    messages: Vec<MessageTemplate>,
    pub published: bool,
}

impl Template {
    pub fn slots(&self) -> Vec<&'static str> {
        let mut v: Vec<&'static str> = self
            .messages
            .iter()
            .flat_map(|m| m.segs.iter())
            .filter_map(|s| match s {
                Seg::Slot(n) => Some(*n),
                _ => None,
            })
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PromptError {
    #[error("missing template slot {0}")]
    MissingSlot(String),
    #[error("template expects a {expected} observation, got {got}")]
    ModalityMismatch { expected: Modality, got: Modality },
    #[error("no template registered for {0:?}")]
    UnknownTemplate(TemplateId),
}

#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    templates: HashMap<TemplateId, Template>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

const DOC_BACKWARD_SYSTEM: &str = "You are a question generator. Given an observation of a document (infographic) and the correct Answer, produce a single, concise, unambiguous question whose answer is exactly the given Answer and should be asking about the information provided by the observation; when grounded ONLY on the observation provided. Rules: (1) Return ONLY the question text. (2) Avoid ambiguous wording; ensure a 1-to-1 mapping, this means the query should not have answers to it other than the correct Answer provided to you. (3) No extra commentary, quotes, or prefixes. (4) Make sure that the question is asking about the observed document (infographic), don't propose random answers to fit the answer.";
const DOC_BACKWARD_BASE: &str = "Base rule: You need to generate a question.\n\n";
const DOC_VISUAL_FOCUS: &str = "Visual focus: In this task, the OBS is an image version of the document (infographic). You must generate the question based solely on visible information in the image, without assuming or inferring any unseen text or external knowledge.";
const DOC_TEXTUAL_FOCUS: &str = "Textual focus: In this task, the OBS is ocr and captioning of an document (infographic) image.";
const DOC_BACKWARD_TAIL: &str = "\nGiven the observation of the document (infographic), I will come up with a document (infographic) facts based Query that can be answered by the given answer. Query is:";
const DOC_FORWARD_HEAD: &str = "You are a helpful assistant for document VQA. Answer with the exact final answer only.\n\nOBS: ";
const DOC_FORWARD_TAIL: &str = "\nAnswer concisely with only the final answer.";

const CHART_BACKWARD_IMAGE: &str = "\nYou are writing ONE short, clear, self-contained question about a chart image such that the answer equals a GIVEN TARGET ANSWER.\n";
const CHART_BACKWARD_TEXT: &str = "You are writing ONE short, clear, self-contained question about a chart based ONLY on the following caption text. The question must have the GIVEN TARGET ANSWER. ";
const CHART_BACKWARD_RULES: &str = "Rules:\n- Must be answerable using chart visual information only.\n- Must not reveal or restate the answer.\n- Avoid yes/no, multiple choice, multi-part questions.\n- Include necessary qualifiers (series, category, unit, timestamp).\n- Length: 1\u{2013}2 sentences, no explanation.\nTarget Answer: ";
const CHART_BACKWARD_END: &str = ". Write the question now. Return only the question string.";
const CHART_FORWARD_IMAGE: &str = "\nYou are given a chart image and a question. Use ONLY the information that is explicitly visible in the chart (titles, labels, legends, tick marks, data labels, notes).\nQuestion:\n";
const CHART_FORWARD_TEXT: &str = "You are given a chart description in JSON extracted from an image. Answer the user's question using ONLY the information contained in the JSON.\nJSON:\n";
const CHART_FORWARD_END: &str = "\nAnswer concisely with plain or numeric text only (no reasoning, no steps, no formatting).";

const GENERIC_BACKWARD_SYSTEM: &str = "You are a question generator. Given an observation and the correct Answer, produce a single, concise, unambiguous question whose answer is exactly the given Answer, grounded ONLY on the observation provided. Rules: (1) Return ONLY the question text. (2) No extra commentary, quotes, or prefixes.";
const GENERIC_IMAGE_FOCUS: &str = "Visual focus: the OBS is an image. Use only information visible in the image.";
const GENERIC_TEXT_FOCUS: &str = "Textual focus: the OBS is a textual description of the content.";
const GENERIC_BACKWARD_TAIL: &str = "\nGiven the observation, I will come up with a Query that can be answered by the given answer. Query is:";
const GENERIC_FORWARD_HEAD: &str = "You are a helpful assistant. Answer with the exact final answer only.\n\nOBS: ";
const GENERIC_FORWARD_TAIL: &str = "\nAnswer concisely with only the final answer.";

const DOC_CAPTION: &str = "\nTranscribe all text in this document (infographic) image (OCR), then give a concise caption of its layout and visual content. Return only the transcription and caption.";
const CHART_CAPTION: &str = "\nDescribe this chart as JSON: include the title, axis labels, legend entries, series names and every data value that is visible. Return only the JSON.";
const GENERIC_CAPTION: &str = "\nDescribe this image in detail, including every visible object, label, number and piece of text, so that a reader could answer questions about it without seeing it. Return only the description.";

fn msg(role: Role, segs: Vec<Seg>) -> MessageTemplate {
    MessageTemplate { role, segs }
}

impl TemplateRegistry {
    pub fn builtin() -> Self {
        use Direction::*;
        use Modality::{Image, Text};
        use Seg::*;
        use TemplateFamily::*;
        let mut t = HashMap::new();
        let mut add = |family, direction, modality, published, messages| {
            t.insert(
                TemplateId::new(family, direction, modality),
                Template { messages, published },
            );
        };

        for (m, focus) in [(Text, DOC_TEXTUAL_FOCUS), (Image, DOC_VISUAL_FOCUS)] {
            add(DocVqa, Backward, m, true, vec![
                msg(Role::System, vec![Lit(DOC_BACKWARD_SYSTEM)]),
                msg(Role::User, vec![
                    Lit(DOC_BACKWARD_BASE), Lit(focus), Lit("\n\nOBS: "), Obs,
                    Lit("\nAnswer: "), Slot("ANS"), Lit(DOC_BACKWARD_TAIL),
                ]),
            ]);
            add(DocVqa, Forward, m, true, vec![msg(Role::User, vec![
                Lit(DOC_FORWARD_HEAD), Obs, Lit("\nQuery: "), Slot("QUESTION"), Lit(DOC_FORWARD_TAIL),
            ])]);
        }

        add(ChartQa, Backward, Image, true, vec![msg(Role::User, vec![
            Obs, Lit(CHART_BACKWARD_IMAGE), Lit(CHART_BACKWARD_RULES), Slot("ANSWER"), Lit(CHART_BACKWARD_END),
        ])]);
        add(ChartQa, Backward, Text, true, vec![msg(Role::User, vec![
            Lit(CHART_BACKWARD_TEXT), Obs, Lit(": \n"), Lit(CHART_BACKWARD_RULES), Slot("ANSWER"), Lit(CHART_BACKWARD_END),
        ])]);
        add(ChartQa, Forward, Image, true, vec![msg(Role::User, vec![
            Obs, Lit(CHART_FORWARD_IMAGE), Slot("QUESTION"), Lit(CHART_FORWARD_END),
        ])]);
        add(ChartQa, Forward, Text, true, vec![msg(Role::User, vec![
            Lit(CHART_FORWARD_TEXT), Obs, Lit("\nQuestion:\n"), Slot("QUESTION"), Lit(CHART_FORWARD_END),
        ])]);

        for (m, focus) in [(Text, GENERIC_TEXT_FOCUS), (Image, GENERIC_IMAGE_FOCUS)] {
            add(Generic, Backward, m, false, vec![
                msg(Role::System, vec![Lit(GENERIC_BACKWARD_SYSTEM)]),
                msg(Role::User, vec![
                    Lit(focus), Lit("\n\nOBS: "), Obs, Lit("\nAnswer: "), Slot("ANS"), Lit(GENERIC_BACKWARD_TAIL),
                ]),
            ]);
            add(Generic, Forward, m, false, vec![msg(Role::User, vec![
                Lit(GENERIC_FORWARD_HEAD), Obs, Lit("\nQuery: "), Slot("QUESTION"), Lit(GENERIC_FORWARD_TAIL),
            ])]);
        }

        for (family, text) in [(DocVqa, DOC_CAPTION), (ChartQa, CHART_CAPTION), (Generic, GENERIC_CAPTION)] {
            add(family, Caption, Image, false, vec![msg(Role::User, vec![Obs, Lit(text)])]);
        }

        TemplateRegistry { templates: t }
    }

    pub fn get(&self, id: TemplateId) -> Option<&Template> {
        self.templates.get(&id)
    }

    pub fn ids(&self) -> Vec<TemplateId> {
        let mut v: Vec<_> = self.templates.keys().copied().collect();
        v.sort();
        v
    }

    pub fn assemble(
        &self,
        id: TemplateId,
        view: &ModalityView,
        slots: &BTreeMap<String, String>,
    ) -> Result<Vec<ChatMessage>, PromptError> {
        let tpl = self.get(id).ok_or(PromptError::UnknownTemplate(id))?;
        let payload_modality = match view.payload {
            ViewPayload::Text(_) => Modality::Text,
            ViewPayload::Image(_) => Modality::Image,
        };
        if view.modality != id.modality || payload_modality != id.modality {
            return Err(PromptError::ModalityMismatch {
                expected: id.modality,
                got: view.modality,
            });
        }
        for name in tpl.slots() {
            if !slots.contains_key(name) {
                return Err(PromptError::MissingSlot(name.to_string()));
            }
        }
        Ok(tpl
            .messages
            .iter()
            .map(|m| render(m, view, slots))
            .collect())
    }
}

fn render(m: &MessageTemplate, view: &ModalityView, slots: &BTreeMap<String, String>) -> ChatMessage {
    let mut parts = Vec::new();
    let mut buf = String::new();
    for seg in &m.segs {
        match seg {
            Seg::Lit(s) => buf.push_str(s),
            Seg::Slot(name) => buf.push_str(&slots[*name]),
            Seg::Obs => match &view.payload {
                ViewPayload::Text(t) => buf.push_str(t),
                ViewPayload::Image(r) => {
                    if !buf.is_empty() {
                        parts.push(Part::Text(std::mem::take(&mut buf)));
                    }
                    parts.push(Part::Image(r.clone()));
                }
            },
        }
    }
    if !buf.is_empty() {
        parts.push(Part::Text(buf));
    }
    ChatMessage { role: m.role, parts }
}

/// Assembles against the built-in registry.
pub fn assemble_prompt(
    id: TemplateId,
    view: &ModalityView,
    slots: &BTreeMap<String, String>,
) -> Result<Vec<ChatMessage>, PromptError> {
    TemplateRegistry::builtin().assemble(id, view, slots)
}

/// Strips the wrapping a model sometimes puts around a one-line answer or
/// question: whitespace, quotes, and a leading `Query:`/`Question:` label.
pub fn clean_generation(raw: &str) -> String {
    let mut s = raw.trim();
    for prefix in ["Query is:", "Query:", "Question:"] {
        if let Some(rest) = s.strip_prefix(prefix) {
            s = rest.trim_start();
        }
    }
    loop {
        let t = s.trim();
        let stripped = [('"', '"'), ('\'', '\''), ('\u{201c}', '\u{201d}'), ('`', '`')]
            .iter()
            .find_map(|(l, r)| t.strip_prefix(*l).and_then(|x| x.strip_suffix(*r)));
        match stripped {
            Some(inner) => s = inner,
            None => return t.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::ImageRef;

    fn slots(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn image() -> ModalityView {
        ModalityView::image(ImageRef::Url("https://x/c.png".into()))
    }

    #[test]
    fn doc_backward_text() {
        let id = TemplateId::new(TemplateFamily::DocVqa, Direction::Backward, Modality::Text);
        let msgs = assemble_prompt(id, &ModalityView::text("OCR dump"), &slots(&[("ANS", "42")])).unwrap();
        assert_eq!(msgs.len(), 2);
        assert_eq!(msgs[0].role, Role::System);
        assert!(msgs[0].text().contains("Return ONLY the question text"));
        let user = msgs[1].text();
        assert!(user.contains("OBS: OCR dump"));
        assert!(user.contains("Answer: 42"));
        assert!(user.contains("Textual focus"));
        assert!(user.ends_with("Query is:"));
    }

    #[test]
    fn doc_backward_image_splits_parts() {
        let id = TemplateId::new(TemplateFamily::DocVqa, Direction::Backward, Modality::Image);
        let msgs = assemble_prompt(id, &image(), &slots(&[("ANS", "42")])).unwrap();
        let parts = &msgs[1].parts;
        assert_eq!(parts.len(), 3);
        assert!(matches!(&parts[0], Part::Text(t) if t.ends_with("OBS: ")));
        assert!(matches!(&parts[1], Part::Image(_)));
        assert!(matches!(&parts[2], Part::Text(t) if t.starts_with("\nAnswer: 42") && t.ends_with("Query is:")));
    }

    #[test]
    fn chart_forward_image() {
        let id = TemplateId::new(TemplateFamily::ChartQa, Direction::Forward, Modality::Image);
        let msgs = assemble_prompt(id, &image(), &slots(&[("QUESTION", "Which bar is tallest?")])).unwrap();
        assert_eq!(msgs.len(), 1);
        assert!(matches!(msgs[0].parts[0], Part::Image(_)));
        let text = msgs[0].text();
        assert!(text.contains("Which bar is tallest?"));
        assert!(text.contains("Answer concisely with plain or numeric text only"));
    }

    #[test]
    fn chart_backward_text_ends_with_contract() {
        let id = TemplateId::new(TemplateFamily::ChartQa, Direction::Backward, Modality::Text);
        let msgs = assemble_prompt(id, &ModalityView::text("{\"title\":\"x\"}"), &slots(&[("ANSWER", "12")])).unwrap();
        let t = msgs[0].text();
        assert!(t.contains("Target Answer: 12. Write the question now."));
        assert!(t.ends_with("Return only the question string."));
    }

    #[test]
    fn missing_slot_and_mismatch() {
        let id = TemplateId::new(TemplateFamily::DocVqa, Direction::Backward, Modality::Text);
        assert_eq!(
            assemble_prompt(id, &ModalityView::text("x"), &BTreeMap::new()),
            Err(PromptError::MissingSlot("ANS".into()))
        );
        assert!(matches!(
            assemble_prompt(id, &image(), &slots(&[("ANS", "1")])),
            Err(PromptError::ModalityMismatch { .. })
        ));
    }

    #[test]
    fn registry_is_total_over_cycle_matrix() {
        let reg = TemplateRegistry::builtin();
        for family in [TemplateFamily::DocVqa, TemplateFamily::ChartQa, TemplateFamily::Generic] {
            for dir in [Direction::Backward, Direction::Forward] {
                for m in [Modality::Text, Modality::Image] {
                    assert!(reg.get(TemplateId::new(family, dir, m)).is_some(), "{family:?} {dir:?} {m:?}");
                }
            }
            assert!(reg.get(TemplateId::new(family, Direction::Caption, Modality::Image)).is_some());
        }
        assert!(!reg.get(TemplateId::new(TemplateFamily::Generic, Direction::Forward, Modality::Text)).unwrap().published);
        assert!(reg.get(TemplateId::new(TemplateFamily::ChartQa, Direction::Forward, Modality::Text)).unwrap().published);
    }

    #[test]
    fn family_lookup() {
        assert_eq!(TemplateFamily::for_dataset("InfoVQA"), TemplateFamily::DocVqa);
        assert_eq!(TemplateFamily::for_dataset("chartqa-train"), TemplateFamily::ChartQa);
        assert_eq!(TemplateFamily::for_dataset("scienceqa"), TemplateFamily::Generic);
    }

    #[test]
    fn cleaning() {
        assert_eq!(clean_generation("  \"What is the total?\"  "), "What is the total?");
        assert_eq!(clean_generation("Query: 'How many?'"), "How many?");
        assert_eq!(clean_generation("  \n "), "");
    }
}
