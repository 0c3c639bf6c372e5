mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "poisid", version, about = "Semantic IDs for points of interest")]
struct Cli {
    /// Config file with `section.key = value` lines.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set rqvae.epochs=50`. Wins over the file
    /// and POISID_* variables.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse, filter and split check-ins.
    Ingest,
    /// Build the multi-hot POI feature matrix.
    Features,
    /// Train the residual-quantized autoencoder.
    TrainCodebook,
    /// Quantize every POI and assign semantic IDs.
    AssignSids,
    /// Print uniqueness and collision counts.
    Stats,
    /// Write the fine-tuning JSONL.
    EmitPrompts,
    /// Write the ordered evaluation manifest.
    EmitEval,
    /// Predict with the Markov baseline and score it.
    Baseline,
    /// Score an external prediction file, one SID per line.
    Score {
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Prefix/category profiles, prefix similarity and embedding export.
    Analyze,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = config::resolve(cli.config.as_deref(), |k| std::env::var(k).ok(), &cli.overrides).and_then(|cfg| {
        let ctx = stages::Context::new(cfg);
        match cli.command {
            Command::Ingest => stages::ingest(&ctx),
            Command::Features => stages::features(&ctx),
            Command::TrainCodebook => stages::train_codebook(&ctx),
            Command::AssignSids => stages::assign_sids(&ctx),
            Command::Stats => stages::stats(&ctx),
            Command::EmitPrompts => stages::emit_prompts(&ctx),
            Command::EmitEval => stages::emit_eval(&ctx),
            Command::Baseline => stages::baseline(&ctx),
            Command::Score { predictions } => stages::score(&ctx, &predictions),
            Command::Analyze => stages::analyze(&ctx),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
