//! Cross-modal cycle-consistency reward orchestration.
//!
//! The crate turns a chat-style multimodal model into reward-annotated GRPO
//! training batches: candidate answers are turned back into questions
//! (backward inference) from a text or image view, the questions are answered
//! again from either view (forward inference), and each reconstruction earns a
//! binary reward for matching the original answer. Majority-vote baselines,
//! evaluation metrics and a scripted simulation lab live alongside.

pub mod backend;
pub mod cycle;
pub mod datamodel;
pub mod eval;
pub mod exec;
pub mod grpo;
pub mod jsonl;
pub mod matcher;
pub mod prep;
pub mod simlab;
pub mod voting;

pub use datamodel::{
    stable_record_id, validate_sample, Answer, ImageRef, Modality, ModalityView, PipelineConfig,
    Query, QueryOrigin, Rollout, RolloutGroup, Sample, SamplingParams, ValidationStage,
    ViewPayload,
};
pub use matcher::{equivalence_cluster, matches, normalize, MatcherPolicy, NumericMode};
