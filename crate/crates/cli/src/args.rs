use std::path::PathBuf;

use aes_core::DType;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "aes",
    version,
    about = "Automatic essay scoring: corpus statistics, splitting, vocabulary, training and evaluation",
    args_override_self = true
)]
pub struct Cli {
    /// Global seed; split, init, shuffle and dropout seeds are derived from it
    #[arg(long, global = true, help_heading = "Global options", default_value_t = 0)]
    pub seed: u64,

    /// Element type for training and gradient checks
    #[arg(long, global = true, help_heading = "Global options", default_value = "f32", value_parser = parse_dtype)]
    pub precision: DType,

    /// JSON file whose keys mirror the long flags; explicit flags win
    #[arg(long, global = true, help_heading = "Global options")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Grade-count table per competency, as CSV
    Stats(StatsArgs),
    /// Seeded train/validation/test split with a membership manifest
    Split(SplitArgs),
    /// Build a WordPiece vocabulary from a corpus
    BuildVocab(BuildVocabArgs),
    /// Train a scorer and write a checkpoint and per-epoch history
    Train(TrainArgs),
    /// QWK and RMSE report for a checkpoint on a labelled corpus
    Eval(EvalArgs),
    /// Score one essay: five grid scores and their total
    Score(ScoreArgs),
    /// Compare analytic gradients with finite differences
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatArg {
    /// Decide from the file extension (.csv is CSV, anything else JSONL)
    Auto,
    Jsonl,
    Csv,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    /// Corpus file
    #[arg(long)]
    pub input: PathBuf,
    /// Corpus file format
    #[arg(long, value_enum, default_value_t = FormatArg::Auto)]
    pub format: FormatArg,
    /// Write the CSV here instead of standard output
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    /// Corpus file
    #[arg(long)]
    pub input: PathBuf,
    /// Corpus file format
    #[arg(long, value_enum, default_value_t = FormatArg::Auto)]
    pub format: FormatArg,
    /// Train, validation and test fractions
    #[arg(long, default_value = "0.70,0.15,0.15", value_parser = parse_ratios)]
    pub ratios: Ratios,
    /// Directory for train.jsonl, val.jsonl, test.jsonl and split.json
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ratios(pub [f64; 3]);

#[derive(Debug, Args, Serialize)]
pub struct BuildVocabArgs {
    /// Corpus file
    #[arg(long)]
    pub input: PathBuf,
    /// Corpus file format
    #[arg(long, value_enum, default_value_t = FormatArg::Auto)]
    pub format: FormatArg,
    /// Target vocabulary size
    #[arg(long, default_value_t = 8000)]
    pub size: usize,
    /// Minimum count for a word or suffix piece
    #[arg(long, default_value_t = 2)]
    pub min_freq: usize,
    /// Vocabulary file, one token per line
    #[arg(long, default_value = "vocab.txt")]
    pub output: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Training corpus
    #[arg(long)]
    pub train: PathBuf,
    /// Validation corpus, evaluated after every epoch
    #[arg(long)]
    pub val: PathBuf,
    /// Corpus file format
    #[arg(long, value_enum, default_value_t = FormatArg::Auto)]
    pub format: FormatArg,
    /// Vocabulary file
    #[arg(long)]
    pub vocab: PathBuf,
    /// Preset (base, desk, toy) or a JSON model configuration file
    #[arg(long, default_value = "desk")]
    pub model_config: String,
    /// Passes over the training set
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    /// Essays per optimizer step
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// AdamW learning rate
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Decoupled weight decay (biases and layer norms excluded)
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    /// Linear warmup length in optimizer steps; 0 disables warmup
    #[arg(long, default_value_t = 0)]
    pub warmup_steps: usize,
    /// Clip the global gradient norm to this value
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Sequence length after truncation and padding
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    /// Checkpoint file to write
    #[arg(long, default_value = "model.aesm")]
    pub out_checkpoint: PathBuf,
    /// Per-epoch loss and validation RMSE, as CSV
    #[arg(long, default_value = "history.csv")]
    pub history_out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Model checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Vocabulary file, one token per line
    #[arg(long)]
    pub vocab: PathBuf,
    /// Labelled corpus to score
    #[arg(long)]
    pub data: PathBuf,
    /// Corpus file format
    #[arg(long, value_enum, default_value_t = FormatArg::Auto)]
    pub format: FormatArg,
    /// Sequence length [default: the model's maximum positions]
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Write the CSV report here as well as printing the table
    #[arg(long)]
    pub report_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    /// Model checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Vocabulary file, one token per line
    #[arg(long)]
    pub vocab: PathBuf,
    /// File holding the prompt (theme) text
    #[arg(long)]
    pub prompt_file: PathBuf,
    /// File holding the essay text
    #[arg(long)]
    pub essay_file: PathBuf,
    /// Sequence length [default: the model's maximum positions]
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FdArg {
    /// Same precision as the model
    Native,
    /// Widen to f64 for the perturbed evaluations
    F64,
}

#[derive(Debug, Args, Serialize)]
pub struct GradCheckArgs {
    /// Corpus supplying the batch (its first records are used)
    #[arg(long)]
    pub data: PathBuf,
    /// Corpus file format
    #[arg(long, value_enum, default_value_t = FormatArg::Auto)]
    pub format: FormatArg,
    /// Vocabulary file, one token per line
    #[arg(long)]
    pub vocab: PathBuf,
    /// Check this checkpoint instead of a freshly initialized model
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Preset or JSON model configuration, used without --checkpoint
    #[arg(long, default_value = "toy")]
    pub model_config: String,
    /// Essays in the checked batch
    #[arg(long, default_value_t = 2)]
    pub batch_size: usize,
    /// Sequence length after truncation and padding
    #[arg(long, default_value_t = 24)]
    pub max_len: usize,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    /// Number of sampled scalar parameters
    #[arg(long, default_value_t = 200)]
    pub sample: usize,
    /// Multiply weight matrices and embeddings by this before checking
    #[arg(long, default_value_t = 1.0)]
    pub weight_scale: f64,
    /// Only sample parameters whose name starts with one of these (comma separated)
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<String>,
    /// Never sample parameters whose name contains one of these (comma separated)
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<String>,
    /// Arithmetic for the finite-difference evaluations
    #[arg(long, value_enum, default_value_t = FdArg::Native)]
    pub fd_precision: FdArg,
    /// Exit with status 1 when the maximum relative error exceeds this
    #[arg(long)]
    pub threshold: Option<f64>,
}

fn parse_dtype(s: &str) -> Result<DType, String> {
    s.parse()
}

fn parse_ratios(s: &str) -> Result<Ratios, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let arr: [f64; 3] = parts
        .try_into()
        .map_err(|_| "expected three comma-separated fractions".to_string())?;
    Ok(Ratios(arr))
}
