mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Emotion classification of dialogue utterances with a small transformer
/// encoder.
#[derive(Debug, Parser)]
#[command(name = "dialogemo", version, arg_required_else_help = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Config file of `key = value` lines (default: $DIALOGEMO_CONFIG).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Dataset preset: friends or emotionpush.
    #[arg(long, global = true)]
    pub dataset: Option<String>,
    /// Seed for every random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a dialogue file and print label statistics.
    Ingest {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Build utterance pairs and write them as JSON lines.
    Prep {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print `[CLS] ... [SEP] ... [SEP]` rows instead of JSON.
        #[arg(long)]
        render: bool,
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
        /// Keep only anger, joy, neutral and sadness targets.
        #[arg(long)]
        eval_labels: bool,
    },
    /// Build a vocabulary from dialogue files and optional corpora.
    Vocab {
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        /// Pre-training scene corpus (one utterance per line).
        #[arg(long)]
        corpus: Vec<PathBuf>,
        /// Tweet file (text, tab, hashtags).
        #[arg(long)]
        tweets: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pre-train the encoder.
    Pretrain {
        #[command(subcommand)]
        task: PretrainTask,
    },
    /// Fine-tune on a dialogue file.
    Train {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[command(flatten)]
        run: RunOpts,
        /// Also write the metrics log here.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Report precision, recall and F1 of a checkpoint on labelled dialogues.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
        /// Print the JSON report instead of the table.
        #[arg(long)]
        json: bool,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label every utterance of an unlabelled dialogue file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum PretrainTask {
    /// Masked-LM and next-sentence prediction on a scene corpus.
    MlmNsp {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[command(flatten)]
        run: RunOpts,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Hashtag emotion classification on tweets.
    Tweets {
        #[arg(long)]
        tweets: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[command(flatten)]
        run: RunOpts,
    },
}

#[derive(Debug, Args)]
pub struct RunOpts {
    /// Checkpoint to write (default: <paths.checkpoint_dir>/model.cek).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Start from this checkpoint.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Check config and data, then stop without writing anything.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    All,
    Train,
    Val,
}

/// Exit codes: 0 success, 1 usage error, 2 data error.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            commands::exit_code(&e)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    ExitCode::from(run(std::env::args_os()))
}
