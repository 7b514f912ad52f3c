//! `ote`: train, tag, evaluate and inspect opinion target taggers.
//!
//! Exit codes: 0 success, 1 a check or threshold failed, 2 bad usage or
//! unreadable input.

mod commands;
mod config;
mod grid;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use ote_core::evaluation::EmbeddingSource;
use ote_core::Variant;

#[derive(Parser, Debug)]
#[command(name = "ote", version, about = "Opinion target extraction with word and character-level BiGRU taggers")]
pub struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Worker threads (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Train a tagger and write the model file and per-epoch report.
    Train(TrainArgs),
    /// Cross-validated grid search over vocabulary size, hidden size and char dimension.
    Grid(GridArgs),
    /// Extract opinion target spans with a trained model.
    Tag(TagArgs),
    /// Exact-match precision, recall and F1 on gold data, per subset.
    Eval(EvalArgs),
    /// Embedding analyses: neighbors, suffix export, PCA.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Finite-difference check of both model variants' gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    /// By extension: .xml is review XML, .txt plain text, anything else CoNLL.
    Auto,
    Xml,
    Conll,
    Text,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: ote_core::ModelError| e.to_string())
}

fn parse_source(s: &str) -> Result<EmbeddingSource, String> {
    s.parse().map_err(|e: ote_core::EvalError| e.to_string())
}

/// Optimization and shared model flags.
#[derive(Args, Debug, Clone)]
pub struct Training {
    #[arg(long, default_value_t = 100)]
    pub word_dim: usize,
    /// Pretrained word vectors (text format, `token v1 .. vd` per line).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Keep the word embedding table fixed during training.
    #[arg(long)]
    pub freeze_embeddings: bool,
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
    #[arg(long, default_value_t = 5)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    /// Global gradient norm limit.
    #[arg(long, default_value_t = 5.0)]
    pub max_norm: f64,
    /// L2 coefficient on the tag projection and character projection weights.
    #[arg(long, default_value_t = 1e-5)]
    pub l2: f64,
    #[arg(long, default_value_t = 150)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Directory for output files.
    #[arg(long, env = "OTE_OUTPUT_DIR", default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    /// Training data (review XML or CoNLL).
    #[arg(long)]
    pub train: PathBuf,
    /// Validation data; without it a seeded share of --train is held out.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant, default_value = "char+word")]
    pub variant: Variant,
    /// Word vocabulary size (most frequent training words).
    #[arg(long, default_value_t = 20_000)]
    pub vocab: usize,
    /// BiGRU output size (half per direction).
    #[arg(long, default_value_t = 100)]
    pub hidden: usize,
    /// Character embedding size and character GRU units per direction.
    #[arg(long, default_value_t = 100)]
    pub char_dim: usize,
    /// Epochs without validation improvement before stopping.
    #[arg(long, default_value_t = 25)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// Stop as soon as validation F1 reaches this value.
    #[arg(long)]
    pub target_f1: Option<f64>,
    /// Model file to write (default: <out-dir>/model.otem).
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value = "auto")]
    pub format: InputFormat,
    #[command(flatten)]
    pub training: Training,
    /// key=value file with defaults for any of the flags above.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct GridArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long, value_parser = parse_variant, default_value = "char+word")]
    pub variant: Variant,
    /// Comma-separated word vocabulary sizes.
    #[arg(long, value_parser = grid::parse_list, default_value = "10000,20000,50000")]
    pub vocab: grid::List,
    /// Comma-separated hidden sizes.
    #[arg(long, value_parser = grid::parse_list, default_value = "60,100,200")]
    pub hidden: grid::List,
    /// Comma-separated character dimensions (ignored for word-only).
    #[arg(long, value_parser = grid::parse_list, default_value = "20,50,100")]
    pub char_dim: grid::List,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Print the planned combinations and exit.
    #[arg(long)]
    pub dry_run: bool,
    /// Result table (default: <out-dir>/grid.tsv).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "auto")]
    pub format: InputFormat,
    #[command(flatten)]
    pub training: Training,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TagArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Sentences to tag; `-` reads standard input.
    #[arg(long, default_value = "-")]
    pub input: PathBuf,
    #[arg(long, default_value = "auto")]
    pub format: InputFormat,
    /// Span output `id<TAB>start<TAB>end<TAB>text` (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write `token<TAB>tag` lines here.
    #[arg(long)]
    pub conll: Option<PathBuf>,
    /// Refuse models of any other variant.
    #[arg(long, value_parser = parse_variant)]
    pub expect_variant: Option<Variant>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Gold corpus (review XML or CoNLL).
    #[arg(long)]
    pub gold: PathBuf,
    /// Second model; adds a per-subset delta (this model minus the first).
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Comma-separated subsets (default: all seven).
    #[arg(long)]
    pub subsets: Option<String>,
    #[arg(long, default_value = "auto")]
    pub format: InputFormat,
    /// Also write the metrics table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum AnalyzeCmd {
    /// Most cosine-similar vocabulary words.
    Neighbors(NeighborsArgs),
    /// Vectors of frequent words carrying one of the given suffixes.
    SuffixExport(SuffixExportArgs),
    /// Two-dimensional PCA projection of an exported table.
    Pca(PcaArgs),
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("space").required(true).args(["model", "embeddings"])))]
pub struct NeighborsArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Text embedding file instead of a model.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub word: String,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// word or charword (models only).
    #[arg(long, value_parser = parse_source, default_value = "word")]
    pub source: EmbeddingSource,
}

#[derive(Args, Debug)]
pub struct SuffixExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_parser = parse_source, default_value = "word")]
    pub source: EmbeddingSource,
    #[arg(long, value_delimiter = ',', default_value = "ing,ly,able,ish,less,ize")]
    pub suffixes: Vec<String>,
    /// How many of the most frequent vocabulary words to consider.
    #[arg(long, default_value_t = ote_core::evaluation::SUFFIX_TOP_WORDS)]
    pub top: usize,
    /// Output table (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PcaArgs {
    /// Table written by `analyze suffix-export`.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output table (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 17)]
    pub seed: u64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Corrupt the sigmoid derivative to show the check catches it.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

/// Subcommands accepting `--config`.
const CONFIGURABLE: [&str; 4] = ["train", "grid", "tag", "eval"];

/// Parses argv, splicing in `--config` entries when one was given.
fn parse_cli(argv: Vec<OsString>) -> Result<Cli, clap::Error> {
    let root = Cli::command();
    let argv = match config::find(&argv, &CONFIGURABLE) {
        Some((sub, file)) => config::splice(argv.clone(), &root, &sub, &file)
            .map_err(|e| root.clone().error(clap::error::ErrorKind::InvalidValue, format!("{e:#}")))?,
        None => argv,
    };
    Cli::from_arg_matches(&root.try_get_matches_from(argv)?)
}

fn main() -> ExitCode {
    let cli = match parse_cli(std::env::args_os().collect()) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
