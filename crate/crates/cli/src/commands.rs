use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use cycle_reward::backend::{BackendDescriptor, ModelClient, ResponseCache, RetryPolicy, TemplateRegistry};
use cycle_reward::cycle::{run_cycles, CycleConfig, CycleRecord};
use cycle_reward::eval::{self, render_report, run_eval, ReportMeta};
use cycle_reward::exec::Executor;
use cycle_reward::grpo::{export_batches, group_and_normalize, vote_groups, ConfigEcho, RewardGroup};
use cycle_reward::jsonl::{self, file_digest};
use cycle_reward::prep::{
    build_inconsistency_subset, ingest, select_candidates, synthesize_missing, CandidateSource, DatasetFormat,
    Quarantine,
};
use cycle_reward::simlab::{self, compare_reports, render_reports, RewardKind, Scenario};
use cycle_reward::voting::{run_votes, VoteMode, VoteRecord};
use cycle_reward::{validate_sample, Modality, PipelineConfig, Sample, ValidationStage};

use crate::run::{fingerprint, RunDir};
use crate::{CandidateArg, Cli, Command, Format, GlobalArgs};

/// Runs one command; returns the number of quarantined samples.
pub fn dispatch(cli: &Cli) -> Result<usize> {
    let g = &cli.global;
    match &cli.command {
        Command::Prepare {
            dataset,
            out,
            format,
            candidate_source,
        } => prepare(g, dataset, out, *format, *candidate_source),
        Command::Cycle {
            prepared,
            out,
            cycle_config,
        } => cycle(g, prepared, out, cycle_config.as_deref()),
        Command::RewardExport { input, out, mode } => reward_export(g, input, out, mode),
        Command::Eval {
            dataset,
            out,
            format,
            cycles,
            votes,
            subset_rho,
            subset_n,
        } => eval_cmd(
            g,
            dataset,
            out,
            *format,
            cycles.as_deref(),
            votes.as_deref(),
            subset_rho.zip(*subset_n),
        ),
        Command::Simulate {
            scenario,
            preset,
            mode,
            trials,
            out,
        } => simulate(g, scenario.as_deref(), preset, mode, *trials, out),
    }
}

fn load_config(g: &GlobalArgs) -> Result<PipelineConfig> {
    let mut config = match &g.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    let problems = config.validate(g.allow_custom_batch);
    if !problems.is_empty() {
        bail!("invalid config: {}", problems.join("; "));
    }
    Ok(config)
}

fn descriptor(g: &GlobalArgs, seed: u64) -> Result<BackendDescriptor> {
    let spec = g.backend.as_deref().ok_or_else(|| anyhow!("--backend is required for this command"))?;
    if let Some(path) = spec.strip_prefix("scripted:") {
        return Ok(BackendDescriptor::scripted(path, seed)?);
    }
    if let Some(rest) = spec.strip_prefix("live:") {
        let (url, model) = rest
            .rsplit_once('@')
            .ok_or_else(|| anyhow!("live backend must look like live:BASE_URL@MODEL"))?;
        return Ok(BackendDescriptor::live(url, model, &g.auth_env));
    }
    bail!("unknown backend {spec:?}; expected scripted:PATH or live:BASE_URL@MODEL")
}

fn client(desc: &BackendDescriptor, config: &PipelineConfig, run: &RunDir) -> Result<ModelClient> {
    let cache = ResponseCache::open(&run.root)?;
    Ok(ModelClient::new(desc.open()?)
        .with_cache(Arc::new(cache))
        .with_retry(RetryPolicy::new(config.retry_max)))
}

fn config_json(config: &PipelineConfig) -> String {
    serde_json::to_string(config).expect("config serializes")
}

fn write_jsonl<T: Serialize>(run: &RunDir, name: &str, records: &[T]) -> Result<String> {
    jsonl::write(&run.path(name), records)?;
    Ok(name.to_string())
}

fn read_samples(path: &Path, format: Format) -> Result<Vec<Sample>> {
    Ok(match format {
        Format::Prepared => jsonl::read(path)?,
        Format::Generic => ingest(path, DatasetFormat::Generic)?,
        Format::VwaMc => ingest(path, DatasetFormat::VwaMc)?,
    })
}

fn up_to_date(run: &RunDir, stage: &str, fp: &str) -> Option<usize> {
    if run.is_current(stage, fp) {
        println!("{stage}: up to date");
        Some(run.quarantined(stage))
    } else {
        None
    }
}

fn prepare(g: &GlobalArgs, dataset: &Path, out: &Path, format: Format, source: CandidateArg) -> Result<usize> {
    let config = load_config(g)?;
    let desc = descriptor(g, config.seed)?;
    let mut run = RunDir::open(out)?;
    let fp = fingerprint(&[
        "prepare",
        &config_json(&config),
        &desc.fingerprint,
        &file_digest(dataset)?,
        &format!("{format:?}/{source:?}"),
    ]);
    if let Some(q) = up_to_date(&run, "prepare", &fp) {
        return Ok(q);
    }
    let samples = read_samples(dataset, format)?;
    let client = client(&desc, &config, &run)?;
    let templates = TemplateRegistry::builtin();
    let exec = Executor::bounded(config.concurrency_limit);

    let needs_caption = samples.iter().filter(|s| s.text_view.is_none()).count();
    let (captioned, mut quarantine) =
        synthesize_missing(&samples, &config.sampling.greedy(), &client, &templates, &exec);
    let source = match source {
        CandidateArg::TrainingSet => CandidateSource::TrainingSetAnswer,
        CandidateArg::SelfText => CandidateSource::SelfGenerated(Modality::Text),
        CandidateArg::SelfImage => CandidateSource::SelfGenerated(Modality::Image),
    };
    let (with_candidates, q2) = select_candidates(&captioned, source, &config, &client, &templates, &exec)?;
    quarantine.extend(q2);
    let mut prepared = Vec::new();
    for s in with_candidates {
        let problems = validate_sample(&s, ValidationStage::Prepared);
        if problems.is_empty() {
            prepared.push(s);
        } else {
            quarantine.push(Quarantine {
                sample_id: s.id.clone(),
                stage: "validate".into(),
                reason: problems.join("; "),
            });
        }
    }
    quarantine.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let outputs = vec![
        write_jsonl(&run, "prepared.jsonl", &prepared)?,
        write_jsonl(&run, "quarantine.jsonl", &quarantine)?,
    ];
    run.write_config(&config)?;
    println!(
        "prepare: {} prepared, {} quarantined, {needs_caption} caption request(s)",
        prepared.len(),
        quarantine.len()
    );
    run.complete("prepare", fp, outputs, quarantine.len(), &config, Some(&desc.fingerprint))?;
    Ok(quarantine.len())
}

fn cycle(g: &GlobalArgs, prepared: &Path, out: &Path, cycle_config: Option<&str>) -> Result<usize> {
    let mut config = load_config(g)?;
    if let Some(c) = cycle_config {
        config.cycle_config = c.parse::<CycleConfig>().map_err(|e| anyhow!(e))?;
    }
    let desc = descriptor(g, config.seed)?;
    let mut run = RunDir::open(out)?;
    let fp = fingerprint(&["cycle", &config_json(&config), &desc.fingerprint, &file_digest(prepared)?]);
    if let Some(q) = up_to_date(&run, "cycle", &fp) {
        return Ok(q);
    }
    let samples: Vec<Sample> = jsonl::read(prepared)?;
    let client = client(&desc, &config, &run)?;
    let exec = Executor::bounded(config.concurrency_limit);
    let result = run_cycles(&samples, &config, &client, &TemplateRegistry::builtin(), &exec);
    let failed: BTreeSet<&str> = result.failures.iter().map(|f| f.sample_id.as_str()).collect();
    let outputs = vec![
        write_jsonl(&run, "cycles.jsonl", &result.records)?,
        write_jsonl(&run, "failures.jsonl", &result.failures)?,
        write_jsonl(&run, "consistency.jsonl", &result.consistency)?,
    ];
    run.write_config(&config)?;
    let consistent = result.consistency.iter().filter(|c| c.all_paths_consistent).count();
    println!(
        "cycle: {} record(s) from {} sample(s), {} fully consistent, {} sample(s) with failures",
        result.records.len(),
        samples.len(),
        consistent,
        failed.len()
    );
    run.complete("cycle", fp, outputs, failed.len(), &config, Some(&desc.fingerprint))?;
    Ok(failed.len())
}

fn reward_export(g: &GlobalArgs, input: &Path, out: &Path, mode: &str) -> Result<usize> {
    let config = load_config(g)?;
    let kind: RewardKind = mode.parse().map_err(|e: String| anyhow!(e))?;
    let mut run = RunDir::open(out)?;
    let desc = match kind {
        RewardKind::Cycle => None,
        _ => Some(descriptor(g, config.seed)?),
    };
    let backend_fp = desc.as_ref().map(|d| d.fingerprint.clone()).unwrap_or_default();
    let fp = fingerprint(&["reward-export", &config_json(&config), &backend_fp, &file_digest(input)?, mode]);
    if let Some(q) = up_to_date(&run, "reward-export", &fp) {
        return Ok(q);
    }
    let mut outputs = Vec::new();
    let mut quarantined = 0;
    let groups: Vec<RewardGroup> = match kind {
        RewardKind::Cycle => {
            let records: Vec<CycleRecord> = jsonl::read(input)?;
            records.iter().map(RewardGroup::from).collect()
        }
        RewardKind::VoteText | RewardKind::VoteMulti => {
            let vmode = if kind == RewardKind::VoteText { VoteMode::Text } else { VoteMode::Multi };
            let samples: Vec<Sample> = jsonl::read(input)?;
            let client = client(desc.as_ref().expect("vote modes open a backend"), &config, &run)?;
            let exec = Executor::bounded(config.concurrency_limit);
            let (records, failures) =
                run_votes(&samples, vmode, &config, &client, &TemplateRegistry::builtin(), &exec);
            quarantined += failures.len();
            outputs.push(write_jsonl(&run, "votes.jsonl", &records)?);
            outputs.push(write_jsonl(&run, "vote_failures.jsonl", &failures)?);
            records.iter().flat_map(vote_groups).collect()
        }
    };
    let norm = group_and_normalize(&groups, config.kl_coefficient);
    outputs.push(write_jsonl(&run, "degenerate.jsonl", &norm.degenerate)?);
    quarantined += norm.degenerate.len();
    if norm.zero_variance_groups > 0 {
        let total = groups.len() - norm.degenerate.len();
        log::warn!(
            "{} of {total} group(s) have constant rewards; their advantages are all zero",
            norm.zero_variance_groups
        );
    }
    if norm.instances.is_empty() {
        bail!("no rewarded instances to export");
    }
    let batch_dir = run.path("batches");
    let manifest = export_batches(&norm.instances, config.batch_size, config.seed, ConfigEcho::from(&config), &batch_dir)?;
    outputs.push("batches/manifest.json".to_string());
    outputs.extend(manifest.batch_files.iter().map(|f| format!("batches/{}", f.file)));
    run.write_config(&config)?;
    println!(
        "reward-export: {} instance(s) in {} group(s), {} batch(es), {} zero-variance group(s)",
        manifest.total_instances,
        manifest.total_groups,
        manifest.batch_files.len(),
        norm.zero_variance_groups
    );
    run.complete("reward-export", fp, outputs, quarantined, &config, desc.as_ref().map(|d| d.fingerprint.as_str()))?;
    Ok(quarantined)
}

fn eval_cmd(
    g: &GlobalArgs,
    dataset: &Path,
    out: &Path,
    format: Format,
    cycles: Option<&Path>,
    votes: Option<&Path>,
    subset: Option<(f64, usize)>,
) -> Result<usize> {
    let config = load_config(g)?;
    let desc = descriptor(g, config.seed)?;
    let mut run = RunDir::open(out)?;
    let digest = |p: Option<&Path>| p.map(file_digest).transpose().map(Option::unwrap_or_default);
    let fp = fingerprint(&[
        "eval",
        &config_json(&config),
        &desc.fingerprint,
        &file_digest(dataset)?,
        &format!("{format:?}/{subset:?}"),
        &digest(cycles)?,
        &digest(votes)?,
    ]);
    if let Some(q) = up_to_date(&run, "eval", &fp) {
        return Ok(q);
    }
    let samples = read_samples(dataset, format)?;
    let client = client(&desc, &config, &run)?;
    let templates = TemplateRegistry::builtin();
    let exec = Executor::bounded(config.concurrency_limit);
    let (samples, caption_failures) = synthesize_missing(&samples, &config.sampling.greedy(), &client, &templates, &exec);
    let (rows, mut failures) = run_eval(&samples, &config, &client, &templates, &exec);
    failures.extend(caption_failures.into_iter().map(|q| eval::EvalFailure {
        sample_id: q.sample_id,
        reason: q.reason,
    }));
    failures.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));

    let meta = ReportMeta {
        run_id: fp[..16].to_string(),
        backend_fingerprint: desc.fingerprint.clone(),
        matcher: config.matcher_policy.describe(),
        votes: votes
            .map(|p| jsonl::read::<VoteRecord>(p).map(|v| eval::vote_stats(&v)))
            .transpose()?,
        cycles: cycles
            .map(|p| jsonl::read::<CycleRecord>(p).map(|c| eval::cycle_stats(&c)))
            .transpose()?,
    };
    let report = render_report(&rows, &meta);
    let mut outputs = vec![
        write_jsonl(&run, "eval.jsonl", &rows)?,
        write_jsonl(&run, "eval_failures.jsonl", &failures)?,
    ];
    fs::write(run.path("report.md"), &report)?;
    outputs.push("report.md".into());

    if let Some((rho, n)) = subset {
        let s = build_inconsistency_subset(&rows, rho, n, config.seed)?;
        let mut ids = s.ids.join("\n");
        ids.push('\n');
        fs::write(run.path("subset_ids.txt"), ids)?;
        fs::write(run.path("subset_report.json"), serde_json::to_string_pretty(&s.report)? + "\n")?;
        outputs.push("subset_ids.txt".into());
        outputs.push("subset_report.json".into());
        println!("eval: subset of {} id(s), {} inconsistent", s.ids.len(), s.report.inconsistent);
    }
    run.write_config(&config)?;
    match eval::consistency_ratio(&rows) {
        Ok(m) => println!("eval: {} row(s), consistency ratio {:.3} ({}/{})", rows.len(), m.value, m.hits, m.total),
        Err(_) => println!("eval: {} row(s), consistency ratio n/a", rows.len()),
    }
    run.complete("eval", fp, outputs, failures.len(), &config, Some(&desc.fingerprint))?;
    Ok(failures.len())
}

fn simulate(
    g: &GlobalArgs,
    scenario: Option<&Path>,
    presets: &[String],
    mode: &str,
    trials: Option<usize>,
    out: &Path,
) -> Result<usize> {
    let config = load_config(g)?;
    let kinds: Vec<RewardKind> = if mode == "all" {
        RewardKind::ALL.to_vec()
    } else {
        vec![mode.parse().map_err(|e: String| anyhow!(e))?]
    };
    let mut scenarios: Vec<Scenario> = match scenario {
        Some(p) => simlab::load_scenarios(p)?,
        None if presets.is_empty() => simlab::PRESETS.iter().filter_map(|n| simlab::preset(n)).collect(),
        None => presets
            .iter()
            .map(|n| simlab::preset(n).ok_or_else(|| anyhow!("unknown preset {n:?} (known: {:?})", simlab::PRESETS)))
            .collect::<Result<_>>()?,
    };
    for s in &mut scenarios {
        if let Some(seed) = g.seed {
            s.seed = seed;
        }
        if let Some(t) = trials {
            s.trials = t;
        }
    }
    let mut run = RunDir::open(out)?;
    let scen_json = serde_json::to_string(&scenarios)?;
    let fp = fingerprint(&["simulate", &scen_json, mode]);
    if let Some(q) = up_to_date(&run, "simulate", &fp) {
        return Ok(q);
    }
    let mut reports = Vec::new();
    let mut comparisons = Vec::new();
    for s in &scenarios {
        let mut mine = Vec::new();
        for &k in &kinds {
            mine.push(simlab::run_scenario(s, k)?);
        }
        if kinds.len() == RewardKind::ALL.len() {
            comparisons.push(compare_reports(&s.name, &mine));
        }
        reports.extend(mine);
    }
    let md = render_reports(&reports, &comparisons);
    fs::write(run.path("report.md"), &md)?;
    #[derive(Serialize)]
    struct Json<'a> {
        reports: &'a [simlab::ScenarioReport],
        comparisons: &'a [simlab::SignalComparison],
    }
    let json = serde_json::to_string_pretty(&Json {
        reports: &reports,
        comparisons: &comparisons,
    })? + "\n";
    fs::write(run.path("report.json"), json)?;
    print!("{md}");
    run.complete(
        "simulate",
        fp,
        vec!["report.md".into(), "report.json".into()],
        0,
        &config,
        None,
    )?;
    Ok(0)
}
