mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] cqa_core::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cqa", version, about = "Train and evaluate LSTM pair rankers for forum question answering")]
struct Cli {
    /// Flat key=value config file. Flags and --set override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Extra key=value setting; repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Default)]
struct Common {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    dev_corpus: Option<PathBuf>,
    #[arg(long)]
    aux_corpus: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    /// A, B or C
    #[arg(long)]
    task: Option<String>,
    /// parallel, serialized, attention or multitask
    #[arg(long)]
    topology: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        [
            ("corpus", path(&self.corpus)),
            ("dev_corpus", path(&self.dev_corpus)),
            ("aux_corpus", path(&self.aux_corpus)),
            ("embeddings", path(&self.embeddings)),
            ("checkpoint", path(&self.checkpoint)),
            ("pretrained", path(&self.pretrained)),
            ("output", path(&self.output)),
            ("log", path(&self.log)),
            ("task", self.task.clone()),
            ("topology", self.topology.clone()),
            ("epochs", self.epochs.map(|e| e.to_string())),
            ("seed", self.seed.map(|s| s.to_string())),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    groups: usize,
    #[arg(long, default_value_t = 10)]
    candidates: usize,
    #[arg(long, default_value_t = 50)]
    vocab_size: usize,
    #[arg(long, default_value_t = 10)]
    keywords: usize,
    /// Distinct keywords planted in each query.
    #[arg(long, default_value_t = 1)]
    query_keywords: usize,
    /// Query length range, e.g. 3-6.
    #[arg(long, value_parser = parse_range, default_value = "3-6")]
    query_len: (usize, usize),
    #[arg(long, value_parser = parse_range, default_value = "3-6")]
    candidate_len: (usize, usize),
    #[arg(long, default_value_t = 0.4)]
    positive_rate: f64,
    /// Prefix for generated query ids.
    #[arg(long, default_value = "")]
    id_prefix: String,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s.split_once('-').unwrap_or((s, s));
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(lo)?, num(hi)?))
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write the best-dev checkpoint.
    Train(#[command(flatten)] Common),
    /// Print MAP, precision, recall and F1 of a checkpoint (or a baseline).
    Evaluate(#[command(flatten)] Common),
    /// Write `query_id candidate_id score` lines, best first per query.
    Predict(#[command(flatten)] Common),
    /// Add generated related-question pairs (or merge task A into task C).
    Augment(#[command(flatten)] Common),
    /// Check every topology's backward pass against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Combine model ranks with IR ranks.
    Combine(#[command(flatten)] Common),
    /// Write per-instance attention weights.
    DumpAttention(#[command(flatten)] Common),
    /// Generate a planted-keyword synthetic corpus.
    Synth {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        synth: SynthArgs,
    },
}

fn resolve(config_file: Option<&PathBuf>, sets: &[String], common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = config_file {
        cfg.apply_file(path)?;
    }
    for s in sets {
        cfg.apply_override(s)?;
    }
    for (k, v) in common.overrides() {
        cfg.apply(k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = match &cli.command {
        Command::Train(c)
        | Command::Evaluate(c)
        | Command::Predict(c)
        | Command::Augment(c)
        | Command::Combine(c)
        | Command::DumpAttention(c) => c,
        Command::Gradcheck { common, .. } | Command::Synth { common, .. } => common,
    };
    let cfg = resolve(cli.config.as_ref(), &cli.set, common)?;
    match &cli.command {
        Command::Train(_) => commands::train(cfg),
        Command::Evaluate(_) => commands::evaluate(&cfg),
        Command::Predict(_) => commands::predict(&cfg),
        Command::Augment(_) => commands::augment(&cfg),
        Command::Gradcheck { corrupt_backward, .. } => commands::gradcheck(&cfg, *corrupt_backward),
        Command::Combine(_) => commands::combine(&cfg),
        Command::DumpAttention(_) => commands::dump_attention(&cfg),
        Command::Synth { synth, .. } => commands::synth(&cfg, synth),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
