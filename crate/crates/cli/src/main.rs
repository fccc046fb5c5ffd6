use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod error;
mod output;
mod plot;
mod report;

use error::CliError;

#[derive(Parser)]
#[command(name = "mclab", version, about = "Multi-modal contrastive pretraining and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus into an empty directory.
    GenerateData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Generator seed; overrides corpus.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain a model on a corpus.
    Pretrain {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides pretrain.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides pretrain.total_epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Write image or text embeddings of a corpus split to a store file.
    Embed {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        side: SideArg,
        #[arg(long)]
        out: PathBuf,
        /// Overrides eval.split.
        #[arg(long)]
        split: Option<String>,
    },
    /// Zero-shot classification against class prompts.
    Zeroshot(EvalArgs),
    /// Text-to-image, image-to-image and image-to-text retrieval.
    Retrieve(EvalArgs),
    /// Few-shot fine-tuning over shot counts and seeds.
    Fewshot(EvalArgs),
    /// Full-data fine-tuning with a classification head.
    Finetune(EvalArgs),
    /// Collect report lines into a table and plots.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct ConfigArg {
    /// TOML run configuration; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    Image,
    Text,
}

#[derive(Args, Clone)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated class names to evaluate.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    /// Comma-separated K values for Recall@K.
    #[arg(long = "K", visible_alias = "k", value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Comma-separated examples-per-class counts.
    #[arg(long, value_delimiter = ',')]
    shots: Option<Vec<usize>>,
    /// Few-shot repeats per shot count.
    #[arg(long)]
    seeds: Option<usize>,
    /// Base seed of the evaluation.
    #[arg(long)]
    seed: Option<u64>,
    /// Corpus split to evaluate.
    #[arg(long)]
    split: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let out = output::Output::new();
    let result = run(cli.command, &out);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("mclab: {line}");
            out.mark_failed(&line);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command, out: &output::Output) -> Result<(), CliError> {
    use commands::Protocol;
    match command {
        Command::GenerateData { config, out: dir, seed } => {
            let mut cfg = config::RunConfig::load(config.config.as_deref())?;
            if let Some(s) = seed {
                cfg.corpus.seed = s;
            }
            commands::generate_data(cfg, &dir, out)
        }
        Command::Pretrain {
            config,
            data,
            out: dir,
            seed,
            epochs,
        } => {
            let mut cfg = config::RunConfig::load(config.config.as_deref())?;
            if let Some(s) = seed {
                cfg.pretrain.seed = s;
            }
            if let Some(e) = epochs {
                cfg.pretrain.total_epochs = e;
            }
            commands::pretrain(cfg, &data, &dir, out)
        }
        Command::Embed {
            config,
            checkpoint,
            data,
            side,
            out: file,
            split,
        } => {
            let mut cfg = config::RunConfig::load(config.config.as_deref())?;
            if let Some(s) = split {
                cfg.eval.split = commands::parse_split(&s)?;
            }
            let side = match side {
                SideArg::Image => mclab::evaluation::Side::Image,
                SideArg::Text => mclab::evaluation::Side::Text,
            };
            commands::embed(cfg, &checkpoint, &data, side, &file, out)
        }
        Command::Zeroshot(a) => eval(a, Protocol::Zeroshot, out),
        Command::Retrieve(a) => eval(a, Protocol::Retrieval, out),
        Command::Fewshot(a) => eval(a, Protocol::Fewshot, out),
        Command::Finetune(a) => eval(a, Protocol::Finetune, out),
        Command::Report { input, out: file } => report::report(&input, &file, out),
    }
}

fn eval(a: EvalArgs, protocol: commands::Protocol, out: &output::Output) -> Result<(), CliError> {
    let mut cfg = config::RunConfig::load(a.config.config.as_deref())?;
    let e = &mut cfg.eval;
    if let Some(c) = a.classes {
        e.classes = Some(c);
    }
    if let Some(k) = a.ks {
        e.ks = k;
    }
    if let Some(s) = a.shots {
        e.shots = s;
    }
    if let Some(n) = a.seeds {
        e.seeds = n;
    }
    if let Some(s) = a.seed {
        e.seed = s;
    }
    if let Some(s) = a.split {
        e.split = commands::parse_split(&s)?;
    }
    commands::evaluate(cfg, protocol, &a.checkpoint, &a.data, &a.out, out)
}
