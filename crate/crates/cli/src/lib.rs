//! Command-line front end: config loading, subcommands and report files.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::path::PathBuf;
use std::sync::atomic::AtomicBool;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod logging;
pub mod report;

pub use config::AppConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Bad flags, an invalid config, or an unknown name. Maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        EXIT_USAGE
    } else {
        EXIT_RUNTIME
    }
}

#[derive(Debug, Parser)]
#[command(name = "groundconv", version, about = "Synthesize and evaluate document-grounded conversations")]
pub struct Cli {
    /// JSON config file; `${VAR}` in string values reads the environment.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log one JSON event per backend call to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate one conversation per passage.
    Generate(GenerateArgs),
    /// Score a dataset's agent turns against pseudo-references.
    Evaluate(EvaluateArgs),
    /// Produce pseudo-references with the reference backend.
    MakeRefs(MakeRefsArgs),
    /// Convert conversations into instruction-tuning examples.
    ExportSft(ExportSftArgs),
    /// Sample a weighted mixture of JSONL datasets.
    Mix(MixArgs),
    /// Descriptive statistics of a dataset.
    Stats(StatsArgs),
    /// Few-shot roundtrip evaluation on seed queries.
    Roundtrip(RoundtripArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Algorithm id (a preset or one defined in the config).
    #[arg(long)]
    pub algo: Option<String>,
    /// Passage JSONL with `id`, `title`, `text` and optional `sentences`.
    #[arg(long)]
    pub passages: Option<PathBuf>,
    /// Seed conversations supplying the exemplars.
    #[arg(long)]
    pub seeds: Option<PathBuf>,
    /// Sample this many passages.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Conversation JSONL to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Where the segmented documents go; defaults to `<out>.docs.jsonl`.
    #[arg(long)]
    pub docs_out: Option<PathBuf>,
    /// RNG seed; fixes passage sampling and per-request decoding seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Documents processed concurrently.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// User/agent pairs per conversation.
    #[arg(long)]
    pub n_turns: Option<usize>,
    /// Keep prompt/completion exchanges in the traces.
    #[arg(long)]
    pub keep_exchanges: bool,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Conversation JSONL.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Document JSONL (as written by `generate`, or passage records).
    #[arg(long)]
    pub docs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Existing pseudo-reference JSONL.
    #[arg(long, conflicts_with = "make_refs")]
    pub refs: Option<PathBuf>,
    /// Generate the pseudo-references first.
    #[arg(long)]
    pub make_refs: bool,
    /// Save generated pseudo-references here.
    #[arg(long, requires = "make_refs")]
    pub refs_out: Option<PathBuf>,
    /// Seed conversations supplying the reference prompt exemplars.
    #[arg(long)]
    pub seeds: Option<PathBuf>,
    /// Backend name overriding the reference role.
    #[arg(long)]
    pub reference: Option<String>,
    /// JSON report; the text table goes next to it with a `.txt` extension.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-turn scores as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Skip turns without a reference instead of failing.
    #[arg(long)]
    pub allow_missing: bool,
    /// Concurrent reference requests.
    #[arg(long)]
    pub parallelism: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MakeRefsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Seed conversations supplying the reference prompt exemplars.
    #[arg(long)]
    pub seeds: Option<PathBuf>,
    /// Backend name overriding the reference role.
    #[arg(long)]
    pub reference: Option<String>,
    /// Pseudo-reference JSONL to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Concurrent reference requests.
    #[arg(long)]
    pub parallelism: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExportSftArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Instruction-tuning JSONL to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Inputs with at least this many tokens are dropped.
    #[arg(long)]
    pub max_input_tokens: Option<usize>,
    /// Tokenizer endpoint for exact counts.
    #[arg(long)]
    pub tokenizer_url: Option<String>,
    /// Value of the `origin_dataset` field.
    #[arg(long)]
    pub origin: Option<String>,
}

#[derive(Debug, Args)]
pub struct MixArgs {
    /// `PATH=WEIGHT`; weights are normalized to sum to one.
    #[arg(long = "input", required = true, value_name = "PATH=WEIGHT")]
    pub inputs: Vec<String>,
    /// Number of examples in the mixture.
    #[arg(long)]
    pub total: usize,
    /// RNG seed for sampling and shuffling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Mixed JSONL to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Factual-consistency scorer endpoint.
    #[arg(long)]
    pub consistency_url: Option<String>,
    /// JSON report; the text table goes next to it with a `.txt` extension.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RoundtripArgs {
    /// Synthetic conversations used as demonstrations.
    #[arg(long)]
    pub demos: Option<PathBuf>,
    /// Documents of the demonstration conversations.
    #[arg(long)]
    pub docs: Option<PathBuf>,
    /// Seed conversations; their queries are the evaluation set.
    #[arg(long)]
    pub seeds: Option<PathBuf>,
    /// Independent evaluation cycles.
    #[arg(long)]
    pub cycles: Option<usize>,
    /// Queries sampled per cycle.
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Demonstrations per prompt.
    #[arg(long)]
    pub k_shots: Option<usize>,
    /// RNG seed for demonstration and query sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Never draw demonstrations grounded in the query's own document.
    #[arg(long)]
    pub exclude_same_document: bool,
    /// Backend name overriding the agent role.
    #[arg(long)]
    pub agent: Option<String>,
    /// JSON report; the text table goes next to it with a `.txt` extension.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Concurrent agent requests.
    #[arg(long)]
    pub parallelism: Option<usize>,
}

/// Runs a parsed command line and returns the process exit code.
pub fn run_cli(cli: Cli, cancel: &AtomicBool) -> i32 {
    match commands::dispatch(&cli, cancel) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// Parses `args` (program name first) and runs them.
pub fn run_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run_cli(cli, &AtomicBool::new(false)),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}
