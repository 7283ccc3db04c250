//! `cycle-reward`: prepare data, build cycles, export GRPO batches, evaluate,
//! and run the simulation lab.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "cycle-reward", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML pipeline config. Missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// `scripted:PATH` or `live:BASE_URL@MODEL`.
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// Environment variable holding the bearer token for live backends.
    #[arg(long, global = true, default_value = "CYCLE_REWARD_API_KEY")]
    pub auth_env: String,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Treat quarantined samples as a hard failure.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Accept batch sizes other than 256 and 1024.
    #[arg(long, global = true)]
    pub allow_custom_batch: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Ingest a dataset, caption image-only samples and pick candidate answers.
    Prepare {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Generic)]
        format: Format,
        #[arg(long, value_enum, default_value_t = CandidateArg::TrainingSet)]
        candidate_source: CandidateArg,
    },
    /// Build cycle records from prepared samples.
    Cycle {
        #[arg(long)]
        prepared: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// single, cross or mixed. Overrides the config.
        #[arg(long)]
        cycle_config: Option<String>,
    },
    /// Turn cycle records (or fresh votes over prepared samples) into
    /// advantage-annotated batches.
    RewardExport {
        /// `cycles.jsonl` for `--mode cycle`, prepared samples for vote modes.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// cycle, vote-text or vote-multi.
        #[arg(long, default_value = "cycle")]
        mode: String,
    },
    /// Per-modality accuracy and consistency ratio.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Prepared)]
        format: Format,
        /// Include cycle-reward statistics from this `cycles.jsonl`.
        #[arg(long)]
        cycles: Option<PathBuf>,
        /// Include vote statistics from this `votes.jsonl`.
        #[arg(long)]
        votes: Option<PathBuf>,
        /// Fraction of the subset drawn from samples whose two views disagree.
        #[arg(long, requires = "subset_n")]
        subset_rho: Option<f64>,
        /// Subset size; written to `subset_ids.txt`.
        #[arg(long, requires = "subset_rho")]
        subset_n: Option<usize>,
    },
    /// Run scripted scenarios through voting and cycle rewards.
    Simulate {
        /// Line-delimited scenario file.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Built-in scenario; repeatable. Used when no file is given.
        #[arg(long)]
        preset: Vec<String>,
        /// cycle, vote-text, vote-multi or all.
        #[arg(long, default_value = "all")]
        mode: String,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Generic,
    VwaMc,
    /// Sample records as written by `prepare`.
    Prepared,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateArg {
    TrainingSet,
    SelfText,
    SelfImage,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(q) if cli.global.strict => {
            eprintln!("error: {q} sample(s) quarantined (--strict)");
            ExitCode::from(1)
        }
        Ok(q) => {
            eprintln!("warning: {q} sample(s) quarantined");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
