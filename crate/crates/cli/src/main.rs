//! `snf`: define a space, search it, extract, train, and evaluate.
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid input, 3 an infeasible
//! parameter bin, 4 training divergence.

mod commands;
mod manifest;
mod specs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use snf_core::Error;

use commands::Outcome;

#[derive(Parser)]
#[command(name = "snf", version, about = "Sub-network search, extraction, and distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a randomly initialized supernet checkpoint.
    Init(InitArgs),
    /// Write a synthetic text corpus.
    GenCorpus(GenCorpusArgs),
    /// Evolutionary search for the best sub-network in each parameter bin.
    Search(SearchArgs),
    /// Copy a sub-network out of a supernet into a standalone checkpoint.
    Extract(ExtractArgs),
    /// Train a model with the language-modeling loss.
    Pretrain(TrainArgs),
    /// Train a student against a frozen teacher.
    Distill(DistillArgs),
    /// Print validation perplexity.
    Eval(EvalArgs),
}

#[derive(Args)]
pub struct InitArgs {
    /// Supernet dimensions (TOML).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub bytes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricKind {
    Ppl,
    Importance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Sources {
    Activation,
    Weight,
}

#[derive(Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub space: PathBuf,
    #[arg(long)]
    pub supernet: PathBuf,
    /// `[[bins]]` tables with `lower` and `upper`.
    #[arg(long)]
    pub bins: PathBuf,
    /// Population settings (TOML); defaults when omitted.
    #[arg(long)]
    pub evo: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MetricKind::Ppl)]
    pub metric: MetricKind,
    /// Precomputed importance tables.
    #[arg(long)]
    pub importance: Option<PathBuf>,
    /// How to compute importance tables when none are given.
    #[arg(long, value_enum, default_value_t = Sources::Activation)]
    pub source: Sources,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the evo spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 4)]
    pub eval_batches: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    /// Defaults to the smaller of 64 and the supernet's context.
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Continue bins from the saved per-epoch state.
    #[arg(long)]
    pub resume: bool,
    #[arg(long, env = "SNF_WORKERS", default_value_t = 1)]
    pub workers: usize,
}

#[derive(Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub supernet: PathBuf,
    /// Sub-network configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Init {
    /// Keep the checkpoint's weights.
    Checkpoint,
    /// Reinitialize the architecture with the training seed.
    Random,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Optimization settings (TOML); defaults when omitted.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Init::Checkpoint)]
    pub init: Init,
    /// Overrides the train spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many steps without changing the schedule.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Args)]
pub struct DistillArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub teacher: PathBuf,
    /// Loss weights, temperature, and logit mode (TOML).
    #[arg(long)]
    pub distill: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Train spec whose validation schedule to use.
    #[arg(long)]
    pub train: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_) | Error::Parameter(_) => 2,
        Error::Rejection { .. } => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Init(a) => commands::init(a),
        Command::GenCorpus(a) => commands::gen_corpus(a),
        Command::Search(a) => commands::search(a),
        Command::Extract(a) => commands::extract(a),
        Command::Pretrain(a) => commands::pretrain_cmd(a),
        Command::Distill(a) => commands::distill_cmd(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Infeasible) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
