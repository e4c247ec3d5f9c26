//! `acfg`: train count models, decode with guidance, and run benchmarks,
//! sweeps and trace exports from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{CliError, ConfigFile};

#[derive(Parser)]
#[command(name = "acfg", version, about = "Guided decoding for masked diffusion models")]
struct Cli {
    /// Settings file with `key = value` lines, one key per long flag
    /// (dashes or underscores). Flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a count model on a synthetic task and save it as JSON.
    Train(TrainArgs),
    /// Decode one prompt and print the result.
    Generate(GenerateArgs),
    /// Evaluate decoding modes on the held-out set and print CSV.
    Bench(BenchArgs),
    /// Sweep adaptive guidance over a (rho, w) grid.
    Ablate(AblateArgs),
    /// Decode one held-out instance (sort unless a model or task is given)
    /// and write the confidence heatmap and refinement exports.
    TraceDemo(TraceDemoArgs),
    /// Handshake with a model server and run one logits round trip.
    ServeCheck(ServeCheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    None,
    StaticCfg,
    Acfg,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum MetricArg {
    ArgmaxProb,
    CurrentTokenProb,
    NegEntropy,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ScopeArg {
    AllNonmask,
    GeneratedOnly,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum SamplerArg {
    Greedy,
    Temperature,
}

#[derive(Args)]
pub struct ModelArgs {
    /// Count model JSON file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Remote model server address, `host:port`.
    #[arg(long, conflicts_with_all = ["model", "command"])]
    tcp: Option<String>,
    /// Remote model server command speaking the protocol on stdio.
    #[arg(long, conflicts_with = "model")]
    command: Option<String>,
    /// Per-request timeout for remote models.
    #[arg(long)]
    timeout_ms: Option<u64>,
}

#[derive(Args)]
pub struct DecodeArgs {
    #[arg(long)]
    gen_len: Option<usize>,
    /// Denoising steps; defaults to the generation length.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Guidance weight.
    #[arg(long)]
    w: Option<f64>,
    /// Fraction of tokens re-masked for the unconditional input.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    #[arg(long, value_enum)]
    scope: Option<ScopeArg>,
    #[arg(long, value_enum)]
    sampler: Option<SamplerArg>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Decode seed. Falls back to the settings file, then `ACFG_SEED`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Default)]
pub struct DataArgs {
    /// Task name: copy, sort, mod_add or sudoku4. Defaults to the task the
    /// model was trained on.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    eval_size: Option<usize>,
    /// Seed for dataset generation when the model carries no provenance.
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    masking_samples: Option<usize>,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Whitespace-separated prompt tokens. Defaults to the first held-out
    /// instance.
    #[arg(long)]
    prompt: Option<String>,
}

#[derive(Args)]
pub struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record wall-clock time per run. Off by default so reruns are
    /// byte-identical.
    #[arg(long)]
    timing: bool,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Use the 5x5 default grid.
    #[arg(long, conflicts_with_all = ["rhos", "ws"])]
    grid_default: bool,
    #[arg(long, value_delimiter = ',')]
    rhos: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    ws: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
pub struct TraceDemoArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Also write an SVG rendering of the heatmap.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
pub struct ServeCheckArgs {
    #[arg(long, conflicts_with = "command")]
    tcp: Option<String>,
    #[arg(long)]
    command: Option<String>,
    #[arg(long)]
    timeout_ms: Option<u64>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Train(a) => commands::train(a, &file),
        Command::Generate(a) => commands::generate(a, &file),
        Command::Bench(a) => commands::bench(a, &file),
        Command::Ablate(a) => commands::ablate(a, &file),
        Command::TraceDemo(a) => commands::trace_demo(a, &file),
        Command::ServeCheck(a) => commands::serve_check(a, &file),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("acfg: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
