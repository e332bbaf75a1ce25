use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use erc_core::config::ModelKind;
use erc_core::corpus::Split;
use erc_core::embedding::EmbeddingSource;
use erc_core::llm::UnparsablePolicy;
use erc_core::metrics::NeutralPolicy;
use erc_core::trainer::{LossMode, Subnetwork};
use erc_core::triplet::{Distance, SamplingStrategy};

mod commands;

/// Emotion recognition in conversation: training, evaluation and zero-shot
/// LLM scoring.
#[derive(Debug, Parser)]
#[command(name = "erc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Dialog and label statistics of a DailyDialog directory.
    Stats {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Pretrain the classifier on isolated sentence embeddings.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Train a contextual or isolated model.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        eval: EvalArgs,
        /// Start from a pretrained classifier checkpoint.
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Train and evaluate this many seeds and report mean and std.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Score a trained model on one split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Write per-utterance predictions of a trained model.
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        model: PathBuf,
    },
    /// Draw anchor/positive/negative triplets from a split.
    SampleTriplets {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        split: Option<Split>,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Draw anchors uniformly instead of by inverse label frequency.
        #[arg(long)]
        unbalanced: bool,
    },
    /// Zero-shot evaluation of a text-generation endpoint.
    LlmEval {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[command(flatten)]
        llm: LlmArgs,
    },
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// DailyDialog directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sentence-embedding store, or `hash:<dim>[:<seed>]`.
    #[arg(long)]
    embeddings: Option<EmbeddingSource>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long = "model-kind")]
    model_kind: Option<ModelKind>,
    /// Word-vector table for the isolated model.
    #[arg(long)]
    word_embeddings: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    loss_mode: Option<LossMode>,
    #[arg(long)]
    sampling: Option<SamplingStrategy>,
    #[arg(long)]
    distance: Option<Distance>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// 7 (all labels) or 6 (emotions only).
    #[arg(long)]
    label_space: Option<usize>,
    #[arg(long)]
    subnetwork: Option<Subnetwork>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    split: Option<Split>,
    /// Add neutral to the F1 scores. The report is marked non-comparable.
    #[arg(long)]
    include_neutral: bool,
    #[arg(long)]
    neutral_policy: Option<NeutralPolicy>,
}

#[derive(Debug, Args)]
struct LlmArgs {
    /// Built-in template name or template file.
    #[arg(long)]
    template: Option<String>,
    /// Replay fixture instead of a live endpoint.
    #[arg(long, conflicts_with = "endpoint")]
    replay: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    unparsable: Option<UnparsablePolicy>,
    #[arg(long)]
    max_new_tokens: Option<u32>,
    #[arg(long)]
    timeout_secs: Option<u64>,
    #[arg(long)]
    max_retries: Option<u32>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<commands::UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
