mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("CIGNN_GIT_DESCRIBE"), ")");

#[derive(Parser)]
#[command(name = "cignn", version = VERSION, about = "Causality-inspired interpretable graph classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a BA-2Motif dataset.
    Generate {
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory, or a `.jsonl` file path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint, history, report and manifest.
    Train(RunArgs),
    /// Score a checkpoint (or the untrained initial model) on a split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export per-graph explanation edge weights.
    Explain {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train once per `K / (K + L)` ratio with `K + L = 64`.
    Sweep(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` config file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

/// One flag per config key, parsed by the same code as the config file.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    gc_epochs: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    delta: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    l: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    #[arg(long)]
    readout: Option<String>,
    #[arg(long)]
    classifier: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    count: Option<String>,
    #[arg(long)]
    data_seed: Option<String>,
    #[arg(long)]
    mu_grid: Option<String>,
    #[arg(long)]
    ratios: Option<String>,
    #[arg(long)]
    split: Option<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<config::RunConfig, CliError> {
        let o = &self.overrides;
        let pairs = [
            ("epochs", o.epochs.as_ref()),
            ("gc_epochs", o.gc_epochs.as_ref()),
            ("lambda", o.lambda.as_ref()),
            ("lr", o.lr.as_ref()),
            ("weight_decay", o.weight_decay.as_ref()),
            ("batch_size", o.batch_size.as_ref()),
            ("delta", o.delta.as_ref()),
            ("k", o.k.as_ref()),
            ("l", o.l.as_ref()),
            ("dropout", o.dropout.as_ref()),
            ("readout", o.readout.as_ref()),
            ("classifier", o.classifier.as_ref()),
            ("variant", o.variant.as_ref()),
            ("seed", o.seed.as_ref()),
            ("dataset", o.dataset.as_ref()),
            ("count", o.count.as_ref()),
            ("data_seed", o.data_seed.as_ref()),
            ("mu_grid", o.mu_grid.as_ref()),
            ("ratios", o.ratios.as_ref()),
            ("split", o.split.as_ref()),
        ];
        debug_assert_eq!(pairs.len(), config::KEYS.len());
        commands::resolve(self.config.as_ref(), &pairs)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { count, seed, out } => commands::generate(count, seed, &out),
        Command::Train(run) => commands::train_cmd(&run.resolve()?, &run.out),
        Command::Eval { run, checkpoint } => commands::eval_cmd(&run.resolve()?, &run.out, checkpoint.as_deref()),
        Command::Explain { run, checkpoint } => commands::explain_cmd(&run.resolve()?, &run.out, &checkpoint),
        Command::Sweep(run) => commands::sweep_cmd(&run.resolve()?, &run.out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
