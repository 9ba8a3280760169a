mod commands;
mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::CliError;
use factspace::pipeline::Representation;
use factspace::training::DistanceKind;

#[derive(Parser, Debug)]
#[command(
    name = "factspace",
    version,
    about = "Structured fact embeddings: synthesize, train, embed, retrieve, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset, word table and generator record.
    Synth(SynthArgs),
    /// Train Model 1 / Model 2 or fit the CCA baseline.
    Train(TrainArgs),
    /// Embed the test split's facts and images with a checkpoint.
    Embed(EmbedArgs),
    /// Rank facts per image (both metric families) and images per fact.
    Retrieve(RetrieveArgs),
    /// Score ranked lists against the test annotations.
    Eval(EvalArgs),
    /// Tabulate several evaluation reports side by side.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// TOML file with generator settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub predicates: Option<usize>,
    #[arg(long)]
    pub objects: Option<usize>,
    /// Distinct facts of order 1,2,3, e.g. `20,80,200`.
    #[arg(long, value_delimiter = ',')]
    pub facts_per_order: Option<Vec<usize>>,
    #[arg(long)]
    pub images_per_fact: Option<usize>,
    #[arg(long)]
    pub long_tail_exponent: Option<f64>,
    #[arg(long)]
    pub min_images_per_fact: Option<usize>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub holdout_share: Option<f64>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub nonlinear: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    Model1,
    Model2,
    Cca,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DistanceChoice {
    Squared,
    Euclidean,
}

impl From<DistanceChoice> for DistanceKind {
    fn from(d: DistanceChoice) -> Self {
        match d {
            DistanceChoice::Squared => DistanceKind::SquaredEuclidean,
            DistanceChoice::Euclidean => DistanceKind::Euclidean,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub words: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "model1")]
    pub model: ModelChoice,
    /// TOML file with `[train]`, `[loss]`, `[architecture]` and `[cca]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub new_param_lr_multiplier: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub lr_gamma: Option<f64>,
    #[arg(long)]
    pub lr_step_iters: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long, value_enum)]
    pub distance: Option<DistanceChoice>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Model 1 hidden widths, e.g. `128,64`.
    #[arg(long, value_delimiter = ',')]
    pub trunk: Option<Vec<usize>>,
    /// Model 2 common hidden widths.
    #[arg(long, value_delimiter = ',')]
    pub shared: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub s_branch: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub po_branch: Option<Vec<usize>>,
    /// CCA output dimension; defaults to the language embedding width.
    #[arg(long)]
    pub cca_dim: Option<usize>,
    #[arg(long)]
    pub cca_reg: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub words: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IndexChoice {
    Exact,
    Approximate,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    /// `embeddings.jsonl` written by `embed`.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "structured")]
    pub representation: Representation,
    #[arg(long, value_enum, default_value = "exact")]
    pub index: IndexChoice,
    #[arg(long, default_value_t = 0.95)]
    pub target_recall: f64,
    #[arg(long, default_value_t = 0)]
    pub index_seed: u64,
    /// Results kept per query; defaults to the whole database.
    #[arg(long)]
    pub max_results: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory of `retrieve`.
    #[arg(long)]
    pub ranked_dir: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub metric: u8,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// `report.json` files written by `eval`.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn run() -> Result<(), CliError> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            let body = text.split("\n\nUsage").next().unwrap_or(&text);
            let message = body
                .trim_start_matches("error: ")
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" ");
            return Err(CliError::validation(message));
        }
    };
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Embed(a) => commands::embed(a),
        Command::Retrieve(a) => commands::retrieve(a),
        Command::Eval(a) => commands::eval(a),
        Command::Report(a) => commands::report(a),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run() {
        eprintln!("{}", e.line());
        std::process::exit(e.code);
    }
}
