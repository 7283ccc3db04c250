//! Scripted biased-model scenarios run through the real voting and cycle
//! code, plus exact oracles to check them against.
//!
//! A scenario describes one synthetic sample and the rules a scripted model
//! follows for it. Each trial re-runs the pipeline on that sample with its own
//! derived seed, so trials are independent draws of the same biased model.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{
    BackendError, MatchOn, ModelClient, Respond, RetryPolicy, ScriptRule, ScriptedBackend, TemplateRegistry,
};
use crate::cycle::{run_cycles, CycleConfig};
use crate::datamodel::{ImageRef, Modality, ModalityView, PipelineConfig, Sample};
use crate::exec::{par_map_range, Executor};
use crate::grpo::advantages;
use crate::jsonl::{self, JsonlError};
use crate::matcher::{matches, MatcherPolicy};
use crate::voting::{run_votes, VoteMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Answers forward requests on the text view.
    pub text_rule: ScriptRule,
    /// Answers forward requests on the image view.
    pub image_rule: ScriptRule,
    /// Consulted before the view rules; these should cover every backward
    /// request.
    pub backward_rules: Vec<ScriptRule>,
    pub gold: String,
    /// Answer that seeds the cycle. Defaults to `gold`.
    #[serde(default)]
    pub candidate: Option<String>,
    #[serde(default = "default_question")]
    pub question: String,
    pub k: usize,
    pub trials: usize,
    pub seed: u64,
}

fn default_question() -> String {
    "Which answer does the content support?".to_string()
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.k == 0 || self.trials == 0 {
            return Err(SimError::Invalid(format!("{}: k and trials must be >= 1", self.name)));
        }
        for r in self.rules() {
            r.validate().map_err(|e| SimError::Invalid(format!("{}: {e}", self.name)))?;
        }
        Ok(())
    }

    /// The script handed to the backend: backward rules first, then the view
    /// rules pinned to their modality.
    pub fn rules(&self) -> Vec<ScriptRule> {
        let mut rules = self.backward_rules.clone();
        let mut t = self.text_rule.clone();
        t.modality_filter.get_or_insert(Modality::Text);
        let mut i = self.image_rule.clone();
        i.modality_filter.get_or_insert(Modality::Image);
        rules.push(t);
        rules.push(i);
        rules
    }

    pub fn candidate(&self) -> &str {
        self.candidate.as_deref().unwrap_or(&self.gold)
    }

    fn sample(&self) -> Sample {
        let mut s = Sample::new(format!("sim-{}", self.name.replace('/', "-")), "simlab");
        s.text_view = Some(ModalityView::text(format!("Synthetic text view for scenario {}.", self.name)));
        s.image_view = Some(ModalityView::image(ImageRef::Url(format!(
            "https://simlab.invalid/{}.png",
            self.name
        ))));
        s.question = Some(self.question.clone());
        s.gold_answer = Some(self.gold.clone());
        s.candidate_answer = Some(self.candidate().to_string());
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    VoteText,
    VoteMulti,
    Cycle,
}

impl RewardKind {
    pub const ALL: [RewardKind; 3] = [RewardKind::VoteText, RewardKind::VoteMulti, RewardKind::Cycle];
}

impl std::fmt::Display for RewardKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RewardKind::VoteText => "vote-text",
            RewardKind::VoteMulti => "vote-multi",
            RewardKind::Cycle => "cycle",
        })
    }
}

impl std::str::FromStr for RewardKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "vote-text" | "vote_text" => Ok(RewardKind::VoteText),
            "vote-multi" | "vote_multi" => Ok(RewardKind::VoteMulti),
            "cycle" => Ok(RewardKind::Cycle),
            _ => Err(format!("unknown reward kind {s:?} (vote-text, vote-multi, cycle)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("scenario {scenario}: {reason}")]
    Uncovered { scenario: String, reason: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Io(#[from] JsonlError),
}

/// Probability that a vote over `k` i.i.d. answers, each wrong with
/// probability `p_wrong`, elects the wrong answer in a two-answer world.
/// Ties count as wrong, as they resolve when the wrong answer is listed
/// first in the pool.
pub fn oracle_majority_wrong_prob(p_wrong: f64, k: usize) -> f64 {
    (0..=k)
        .filter(|&j| 2 * j > k || (2 * j == k && j > 0))
        .map(|j| binom_pmf(k, j, p_wrong))
        .sum()
}

/// Same world, but the pool order is itself random, so a tie goes to
/// whichever answer happens to come first: half the time, by symmetry.
pub fn oracle_majority_wrong_prob_shuffled(p_wrong: f64, k: usize) -> f64 {
    (0..=k)
        .map(|j| {
            let w = if 2 * j > k {
                1.0
            } else if 2 * j == k && j > 0 {
                0.5
            } else {
                0.0
            };
            w * binom_pmf(k, j, p_wrong)
        })
        .sum()
}

fn binom_pmf(k: usize, j: usize, p: f64) -> f64 {
    choose(k, j) * p.powi(j as i32) * (1.0 - p).powi((k - j) as i32)
}

fn choose(n: usize, r: usize) -> f64 {
    let r = r.min(n - r);
    (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Seed for trial `t`.
pub fn trial_seed(seed: u64, t: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"simlab-trial");
    h.update(seed.to_le_bytes());
    h.update((t as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Per-trial tallies; summed in trial order.
#[derive(Debug, Clone, Default)]
struct Tally {
    label_wrong: usize,
    ties: usize,
    gold_rollouts: usize,
    gold_rewarded: usize,
    other_rollouts: usize,
    other_rewarded: usize,
    gold_adv: f64,
    other_adv: f64,
    groups: usize,
    zero_variance_groups: usize,
    all_consistent: usize,
    path_rewards: BTreeMap<String, (usize, usize)>,
}

impl Tally {
    fn add_group(&mut self, answers: &[&str], rewards: &[u8], gold: &str, policy: &MatcherPolicy) {
        let r: Vec<f64> = rewards.iter().map(|&x| f64::from(x)).collect();
        let adv = advantages(&r);
        self.groups += 1;
        self.zero_variance_groups += usize::from(adv.iter().all(|&a| a == 0.0));
        for ((a, &rw), av) in answers.iter().zip(rewards).zip(adv) {
            if matches(a, gold, policy, None) {
                self.gold_rollouts += 1;
                self.gold_rewarded += usize::from(rw);
                self.gold_adv += av;
            } else {
                self.other_rollouts += 1;
                self.other_rewarded += usize::from(rw);
                self.other_adv += av;
            }
        }
    }

    fn merge(&mut self, o: Tally) {
        self.label_wrong += o.label_wrong;
        self.ties += o.ties;
        self.gold_rollouts += o.gold_rollouts;
        self.gold_rewarded += o.gold_rewarded;
        self.other_rollouts += o.other_rollouts;
        self.other_rewarded += o.other_rewarded;
        self.gold_adv += o.gold_adv;
        self.other_adv += o.other_adv;
        self.groups += o.groups;
        self.zero_variance_groups += o.zero_variance_groups;
        self.all_consistent += o.all_consistent;
        for (k, (n, r)) in o.path_rewards {
            let e = self.path_rewards.entry(k).or_default();
            e.0 += n;
            e.1 += r;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub kind: RewardKind,
    pub trials: usize,
    pub k: usize,
    /// Fraction of trials whose pseudo-label (vote) or candidate (cycle)
    /// does not match gold.
    pub label_wrong_rate: f64,
    /// Vote kinds only.
    pub tie_rate: Option<f64>,
    pub mean_reward_gold: Option<f64>,
    pub mean_reward_other: Option<f64>,
    pub mean_advantage_gold: Option<f64>,
    pub mean_advantage_other: Option<f64>,
    pub zero_variance_rate: f64,
    /// Cycle only: mean reward per path code.
    pub path_reward_means: BTreeMap<String, f64>,
    /// Cycle only.
    pub all_paths_consistent_rate: Option<f64>,
}

fn mean(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

fn pipeline_config(sc: &Scenario) -> PipelineConfig {
    PipelineConfig {
        rollouts_per_modality: sc.k,
        cycle_config: CycleConfig::Mixed,
        concurrency_limit: 1,
        ..PipelineConfig::default()
    }
}

fn run_trial(
    sc: &Scenario,
    kind: RewardKind,
    t: usize,
    sample: &Sample,
    config: &PipelineConfig,
    templates: &TemplateRegistry,
) -> Result<Tally, SimError> {
    let backend = ScriptedBackend::new(sc.rules(), trial_seed(sc.seed, t))?;
    let client = ModelClient::new(Arc::new(backend)).with_retry(RetryPolicy::new(0));
    let exec = Executor::sequential();
    let policy = &config.matcher_policy;
    let samples = std::slice::from_ref(sample);
    let uncovered = |reason: String| SimError::Uncovered {
        scenario: sc.name.clone(),
        reason,
    };
    let mut tally = Tally::default();
    match kind {
        RewardKind::VoteText | RewardKind::VoteMulti => {
            let mode = if kind == RewardKind::VoteText { VoteMode::Text } else { VoteMode::Multi };
            let (records, failures) = run_votes(samples, mode, config, &client, templates, &exec);
            if let Some(f) = failures.into_iter().next() {
                return Err(uncovered(f.reason));
            }
            let rec = &records[0];
            tally.label_wrong = usize::from(!matches(&rec.label.answer.raw, &sc.gold, policy, None));
            tally.ties = usize::from(rec.label.tie_broken);
            for g in &rec.groups {
                let answers: Vec<&str> = g.group.answers().collect();
                tally.add_group(&answers, &g.rewards, &sc.gold, policy);
            }
        }
        RewardKind::Cycle => {
            let out = run_cycles(samples, config, &client, templates, &exec);
            if let Some(f) = out.failures.into_iter().next() {
                return Err(uncovered(f.reason));
            }
            tally.label_wrong = usize::from(!matches(sc.candidate(), &sc.gold, policy, None));
            tally.all_consistent = out.consistency.iter().filter(|c| c.all_paths_consistent).count();
            for r in &out.records {
                let answers: Vec<&str> = r.forward_group.answers().collect();
                tally.add_group(&answers, &r.rewards, &sc.gold, policy);
                let e = tally.path_rewards.entry(r.path.code.to_string()).or_default();
                e.0 += r.rewards.len();
                e.1 += r.rewards.iter().map(|&x| usize::from(x)).sum::<usize>();
            }
        }
    }
    Ok(tally)
}

/// Runs `sc.trials` independent trials of the voting or cycle pipeline.
/// Trials run in parallel; results are aggregated in trial order.
pub fn run_scenario(sc: &Scenario, kind: RewardKind) -> Result<ScenarioReport, SimError> {
    run_with(sc, kind, |f| par_map_range(sc.trials, f))
}

/// Same as [`run_scenario`], with trials spread over `exec`.
pub fn run_scenario_on(
    sc: &Scenario,
    kind: RewardKind,
    exec: &Executor,
) -> Result<ScenarioReport, SimError> {
    run_with(sc, kind, |f| exec.map_range(sc.trials, f))
}

type TrialFn<'a> = &'a (dyn Fn(usize) -> Result<Tally, SimError> + Sync);

fn run_with(
    sc: &Scenario,
    kind: RewardKind,
    map: impl FnOnce(TrialFn<'_>) -> Vec<Result<Tally, SimError>>,
) -> Result<ScenarioReport, SimError> {
    sc.validate()?;
    let sample = sc.sample();
    let config = pipeline_config(sc);
    let templates = TemplateRegistry::builtin();
    let tallies = map(&|t| run_trial(sc, kind, t, &sample, &config, &templates));
    let mut total = Tally::default();
    for t in tallies {
        total.merge(t?);
    }
    let n = sc.trials as f64;
    let is_vote = kind != RewardKind::Cycle;
    Ok(ScenarioReport {
        scenario: sc.name.clone(),
        kind,
        trials: sc.trials,
        k: sc.k,
        label_wrong_rate: total.label_wrong as f64 / n,
        tie_rate: is_vote.then(|| total.ties as f64 / n),
        mean_reward_gold: mean(total.gold_rewarded as f64, total.gold_rollouts),
        mean_reward_other: mean(total.other_rewarded as f64, total.other_rollouts),
        mean_advantage_gold: mean(total.gold_adv, total.gold_rollouts),
        mean_advantage_other: mean(total.other_adv, total.other_rollouts),
        zero_variance_rate: total.zero_variance_groups as f64 / total.groups.max(1) as f64,
        path_reward_means: total
            .path_rewards
            .iter()
            .map(|(k, &(n, r))| (k.clone(), r as f64 / n as f64))
            .collect(),
        all_paths_consistent_rate: (!is_vote).then(|| total.all_consistent as f64 / n),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalRow {
    pub kind: RewardKind,
    pub mean_advantage_gold: Option<f64>,
    pub mean_reward_gold: Option<f64>,
    pub mean_reward_other: Option<f64>,
    /// Gold-matching responses are pushed down on average.
    pub collapse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalComparison {
    pub scenario: String,
    pub rows: Vec<SignalRow>,
}

/// Tolerance below which a mean advantage counts as zero.
pub const ADVANTAGE_EPS: f64 = 1e-9;

pub fn compare_signals(sc: &Scenario) -> Result<SignalComparison, SimError> {
    let reports = RewardKind::ALL
        .iter()
        .map(|&kind| run_scenario(sc, kind))
        .collect::<Result<Vec<_>, SimError>>()?;
    Ok(compare_reports(&sc.name, &reports))
}

/// Builds the comparison from reports already run for one scenario.
pub fn compare_reports(scenario: &str, reports: &[ScenarioReport]) -> SignalComparison {
    let rows = reports
        .iter()
        .map(|r| SignalRow {
            kind: r.kind,
            mean_advantage_gold: r.mean_advantage_gold,
            mean_reward_gold: r.mean_reward_gold,
            mean_reward_other: r.mean_reward_other,
            collapse: r.mean_advantage_gold.is_some_and(|a| a < -ADVANTAGE_EPS),
        })
        .collect();
    SignalComparison {
        scenario: scenario.to_string(),
        rows,
    }
}

pub fn load_scenarios(path: &Path) -> Result<Vec<Scenario>, SimError> {
    let v: Vec<Scenario> = jsonl::read(path)?;
    for s in &v {
        s.validate()?;
    }
    Ok(v)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

pub fn render_reports(reports: &[ScenarioReport], comparisons: &[SignalComparison]) -> String {
    let mut s = String::from("# Simulation report\n\n");
    let _ = writeln!(s, "| scenario | kind | trials | k | label wrong | tie rate | reward gold | reward other | adv gold | adv other | paths |");
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|---|---|");
    for r in reports {
        let paths: Vec<String> = r.path_reward_means.iter().map(|(k, v)| format!("{k}={v:.3}")).collect();
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {:.4} | {} | {} | {} | {} | {} | {} |",
            r.scenario,
            r.kind,
            r.trials,
            r.k,
            r.label_wrong_rate,
            opt(r.tie_rate),
            opt(r.mean_reward_gold),
            opt(r.mean_reward_other),
            opt(r.mean_advantage_gold),
            opt(r.mean_advantage_other),
            if paths.is_empty() { "-".to_string() } else { paths.join(" ") },
        );
    }
    if !comparisons.is_empty() {
        let _ = writeln!(s, "\n## Gold-answer advantage by reward kind\n");
        let _ = writeln!(s, "| scenario | kind | adv gold | collapse |");
        let _ = writeln!(s, "|---|---|---|---|");
        for c in comparisons {
            for r in &c.rows {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} |",
                    c.scenario,
                    r.kind,
                    opt(r.mean_advantage_gold),
                    if r.collapse { "yes" } else { "no" }
                );
            }
        }
    }
    s
}

pub const GOLD: &str = "Paris";
pub const WRONG: &str = "London";
const QUESTION: &str = "Which city is shown as the capital?";

fn backward_for(answer: &str) -> ScriptRule {
    ScriptRule::fixed(MatchOn::AnswerEquals(answer.to_string()), None, QUESTION)
}

fn base(name: &str, text: Respond, image: Respond, k: usize, trials: usize) -> Scenario {
    Scenario {
        name: name.to_string(),
        text_rule: ScriptRule {
            match_on: MatchOn::Any,
            modality_filter: Some(Modality::Text),
            respond: text,
        },
        image_rule: ScriptRule {
            match_on: MatchOn::Any,
            modality_filter: Some(Modality::Image),
            respond: image,
        },
        backward_rules: vec![backward_for(GOLD), backward_for(WRONG)],
        gold: GOLD.to_string(),
        candidate: None,
        question: QUESTION.to_string(),
        k,
        trials,
        seed: 0,
    }
}

/// Text view always answers wrong, image view always right.
pub fn consistent_conflict() -> Scenario {
    base(
        "consistent-conflict",
        Respond::Fixed(WRONG.into()),
        Respond::Fixed(GOLD.into()),
        4,
        100,
    )
}

/// Text view is wrong with probability `p_wrong`; image view is right.
pub fn unstable_recovery(p_wrong: f64, k: usize, trials: usize) -> Scenario {
    base(
        "unstable-recovery",
        Respond::Distribution(vec![(WRONG.into(), p_wrong), (GOLD.into(), 1.0 - p_wrong)]),
        Respond::Fixed(GOLD.into()),
        k,
        trials,
    )
}

/// Both views wrong and the cycle seeded with the wrong answer.
pub fn adversarial() -> Scenario {
    let mut s = base(
        "adversarial",
        Respond::Fixed(WRONG.into()),
        Respond::Fixed(WRONG.into()),
        4,
        50,
    );
    s.candidate = Some(WRONG.into());
    s
}

/// Both views always right.
pub fn unbiased() -> Scenario {
    base("unbiased", Respond::Fixed(GOLD.into()), Respond::Fixed(GOLD.into()), 4, 50)
}

pub fn preset(name: &str) -> Option<Scenario> {
    match name {
        "consistent-conflict" => Some(consistent_conflict()),
        "unstable-recovery" => Some(unstable_recovery(0.7, 5, 2000)),
        "adversarial" => Some(adversarial()),
        "unbiased" => Some(unbiased()),
        _ => None,
    }
}

pub const PRESETS: [&str; 4] = ["consistent-conflict", "unstable-recovery", "adversarial", "unbiased"];
