//! `retforge`: generate, aggregate, grid-search, train and evaluate.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use retforge_core::datagen::SynthSpec;
use retforge_core::loss::{LossKind, DEFAULT_MARGIN};
use retforge_core::model::ModelKind;
use retforge_core::Error as CoreError;

#[derive(Parser, Debug)]
#[command(name = "retforge", version, about = "Document embeddings and residual retrieval networks")]
struct Cli {
    /// Worker threads (falls back to RETFORGE_THREADS, then all cores).
    #[arg(long, global = true, env = "RETFORGE_THREADS")]
    threads: Option<usize>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic token store, index and token lists.
    Gen(GenArgs),
    /// Check that an index tiles its store and every pair resolves.
    Validate(ValidateArgs),
    /// Compute an IDF table from token lists.
    Idf(IdfArgs),
    /// Pool a token store into a document embedding matrix.
    Aggregate(AggregateArgs),
    /// Sweep layer weights over the simplex and rank them by recall@1.
    Grid(GridArgs),
    /// Train a retrieval network on one side, once per seed.
    Train(TrainArgs),
    /// Question side, paragraph side, then question side again on refined paragraphs.
    Pipeline(PipelineArgs),
    /// Recall table, P-R curve and AP for a matrix, optionally through trained models.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct GenArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = SynthSpec::default().n_pairs)]
    pub pairs: usize,
    #[arg(long, default_value_t = SynthSpec::default().dim)]
    pub dim: usize,
    #[arg(long, default_value_t = SynthSpec::default().n_layers)]
    pub layers: usize,
    #[arg(long, default_value_t = SynthSpec::default().min_tokens)]
    pub min_tokens: usize,
    #[arg(long, default_value_t = SynthSpec::default().max_tokens)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = SynthSpec::default().signal_layer)]
    pub signal_layer: usize,
    #[arg(long, default_value_t = SynthSpec::default().noise_sigma)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = SynthSpec::default().distractor_overlap)]
    pub distractor_overlap: f64,
    #[arg(long, default_value_t = SynthSpec::default().stopword_fraction)]
    pub stopword_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct ValidateArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct IdfArgs {
    /// Token lists (`doc_id<TAB>id id id`).
    #[arg(long)]
    pub tokens: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// IDF inputs shared by aggregate and grid.
#[derive(Args, Debug, Serialize)]
pub struct IdfFlags {
    /// IDF table to weight tokens with; needs --tokens.
    #[arg(long, requires = "tokens")]
    pub idf: Option<PathBuf>,
    /// Token ids of every document, in the store's layout.
    #[arg(long)]
    pub tokens: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct AggregateArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    /// Layer weights, comma separated; fractions like 1/3 are accepted.
    #[arg(long, value_delimiter = ',', value_parser = parse_weight, required = true)]
    pub weights: Vec<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub idf: IdfFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct GridArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    /// Simplex denominator.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub step: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub idf: IdfFlags,
    /// Recall cut-offs (default 1,2,5,10,20,50 up to the paragraph count).
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Ranked results as TOML.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelArg {
    Fcrr,
    Convrr,
    Composite,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Fcrr => ModelKind::Fcrr,
            ModelArg::Convrr => ModelKind::ConvRr,
            ModelArg::Composite => ModelKind::Composite,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossArg {
    Triplet,
    Quadratic,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Triplet => LossKind::Triplet,
            LossArg::Quadratic => LossKind::Quadratic,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Question,
    Paragraph,
}

/// Flags shared by train and pipeline.
#[derive(Args, Debug, Serialize)]
pub struct TrainFlags {
    /// Embedding matrix written by `aggregate`; pairs come from its index.
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelArg::Fcrr)]
    pub model: ModelArg,
    #[arg(long, value_enum, default_value_t = LossArg::Triplet)]
    pub loss: LossArg,
    #[arg(long, required = true, help = format!("Loss margin (conventional value: {DEFAULT_MARGIN})"))]
    pub margin: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub wd: f64,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 512)]
    pub batch: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// One run per seed, comma separated.
    #[arg(long = "seed", value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Hardest negatives over the whole pool instead of the batch.
    #[arg(long)]
    pub corpus_mining: bool,
    /// Questions held out for recall@k model selection (default min(5000, n/4)).
    #[arg(long)]
    pub recall_val: Option<usize>,
    /// Questions held out for validation loss (default min(10000, n/4)).
    #[arg(long)]
    pub loss_val: Option<usize>,
    /// Seed of the train/validation split, shared by every run.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Validate every this many epochs.
    #[arg(long, default_value_t = 1)]
    pub eval_every: usize,
    /// Validation recall cut-offs.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: TrainFlags,
    /// Which side the network maps.
    #[arg(long, value_enum, default_value_t = Side::Question)]
    pub side: Side,
}

#[derive(Args, Debug, Serialize)]
pub struct PipelineArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: TrainFlags,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub matrix: PathBuf,
    /// Model applied to question rows.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Model applied to paragraph rows.
    #[arg(long)]
    pub paragraph_checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Also compute ROC AUC.
    #[arg(long)]
    pub auc: bool,
    /// EvalReport as TOML.
    #[arg(long)]
    pub out: PathBuf,
    /// P-R curve CSV (default: the report path with `.pr.csv`).
    #[arg(long)]
    pub pr_csv: Option<PathBuf>,
}

/// A flag combination the command cannot run with.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// `0.5`, `1/3` or `2/3`.
fn parse_weight(s: &str) -> Result<f64, String> {
    let v = match s.split_once('/') {
        Some((num, den)) => {
            let num: f64 = num.trim().parse().map_err(|e| format!("{s}: {e}"))?;
            let den: f64 = den.trim().parse().map_err(|e| format!("{s}: {e}"))?;
            if den == 0.0 {
                return Err(format!("{s}: zero denominator"));
            }
            num / den
        }
        None => s.trim().parse().map_err(|e| format!("{s}: {e}"))?,
    };
    if !v.is_finite() {
        return Err(format!("{s}: not a finite number"));
    }
    Ok(v)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Argument(_) => 2,
                CoreError::Numeric(_) => 3,
                _ => 1,
            };
        }
    }
    1
}

/// The error chain on one line, skipping causes already spelled out by
/// the message above them.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }

    let result = match &cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Validate(a) => commands::validate(a),
        Command::Idf(a) => commands::idf(a),
        Command::Aggregate(a) => commands::aggregate(a),
        Command::Grid(a) => commands::grid(a),
        Command::Train(a) => commands::train(a),
        Command::Pipeline(a) => commands::pipeline(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
