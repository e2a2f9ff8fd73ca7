//! `trustvl`: training, evaluation, instruction generation, retrieval,
//! ablations and gradient checks behind one binary.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use trustvl_core::{DistortionType, Precision};

#[derive(Debug, Parser)]
#[command(name = "trustvl", version, about = "Desk-scale multimodal claim verification toolkit")]
struct Cli {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Numeric precision: single or double.
    #[arg(long, global = true, value_parser = parse_precision)]
    precision: Option<Precision>,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    Precision::parse(s).ok_or_else(|| format!("expected single or double, got {s:?}"))
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Progressive three-stage training.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Generate and verify reasoning instructions.
    GenInstruct(GenArgs),
    /// Retrieve direct and inverse evidence from a corpus.
    Retrieve(RetrieveArgs),
    /// Training ablations and the evidence-corruption sweep.
    Ablate(AblateArgs),
    /// Compare backward gradients with finite differences.
    Gradcheck(GradArgs),
    /// Write a synthetic dataset and matching evidence corpus.
    Synthesize(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum StageArg {
    Stage1,
    Stage2,
    Stage3,
    All,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    /// Output directory for checkpoints and the manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    stage: StageArg,
    /// Reasoning dataset (JSONL); synthesized when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Epochs per stage: one value for all, or three comma-separated.
    #[arg(long, value_delimiter = ',')]
    epochs: Option<Vec<usize>>,
    #[arg(long)]
    batch: Option<usize>,
    /// Samples per synthesized stage dataset (per distortion type for reasoning).
    #[arg(long, default_value_t = 64)]
    synth_n: usize,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset JSONL.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Retrieve evidence from this corpus instead of using supplied evidence.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    max_new: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum BackendArg {
    Stub,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum StubArg {
    Agree,
    Hint,
    Never,
    Fail,
    Mixed,
}

#[derive(Debug, Args, Serialize)]
struct GenArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "stub")]
    backend: BackendArg,
    /// Chat-completions URL for the remote backend.
    #[arg(long)]
    url: Option<String>,
    /// Maximum generation rounds per record.
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum, default_value = "agree")]
    stub_mode: StubArg,
    /// Size of the manual-inspection sample.
    #[arg(long)]
    inspect: Option<usize>,
    /// Retrieve evidence from this corpus instead of using supplied evidence.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[command(group = clap::ArgGroup::new("query").required(true).args(["data", "text"]))]
struct RetrieveArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Claims whose text and image are used as queries.
    #[arg(long)]
    data: Option<PathBuf>,
    /// A single text query; only direct evidence is retrieved.
    #[arg(long)]
    text: Option<String>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum AblateKind {
    Tokens,
    Joint,
    Evidence,
}

#[derive(Debug, Args, Serialize)]
struct AblateArgs {
    #[arg(long, value_enum)]
    kind: AblateKind,
    /// QAVA token counts for the token sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [4, 8, 16, 32, 64])]
    k: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Model for the evidence sweep.
    #[arg(long, required_if_eq("kind", "evidence"))]
    checkpoint: Option<PathBuf>,
    /// Dataset for the evidence sweep.
    #[arg(long, required_if_eq("kind", "evidence"))]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pool_size: usize,
    #[arg(long, default_value_t = 77)]
    pool_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ModuleArg {
    Vision,
    Projector,
    Qava,
    Llm,
    All,
}

#[derive(Debug, Args, Serialize)]
struct GradArgs {
    #[arg(long, value_enum, default_value = "all")]
    module: ModuleArg,
    /// Number of consecutive seeds starting at `--seed`.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Random coordinates checked per parameter tensor.
    #[arg(long, default_value_t = 3)]
    coords: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum SynthKind {
    Textual,
    Visual,
    CrossModal,
    Mixed,
    All,
}

impl SynthKind {
    fn kinds(self) -> Vec<DistortionType> {
        match self {
            SynthKind::Textual => vec![DistortionType::Textual],
            SynthKind::Visual => vec![DistortionType::Visual],
            SynthKind::CrossModal => vec![DistortionType::CrossModal],
            SynthKind::Mixed => vec![DistortionType::Mixed],
            SynthKind::All => DistortionType::BASIC.to_vec(),
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "all")]
    kind: SynthKind,
    /// Records per distortion type; must be even.
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class, e.message.replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
