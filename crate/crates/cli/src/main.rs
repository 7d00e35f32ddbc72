use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ttt_omics_cli::pipeline::{cmd_embed, cmd_evaluate, cmd_preprocess, cmd_synth, cmd_train};
use ttt_omics_cli::{CliError, PipelineConfig};
use ttt_omics_core::Stage;

/// Multimodal single-cell fusion with test-time-training layers.
#[derive(Debug, Parser)]
#[command(name = "ttt-omics", version)]
struct Cli {
    /// TOML pipeline configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output_dir` from the configuration.
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a paired synthetic dataset with labels and ordering tables.
    Synth,
    /// Normalize, select variable genes and sort features.
    Preprocess,
    /// Run one training stage.
    Train {
        /// 1 = masked pretraining, 2 = paired fine-tuning, 3 = RNA-only transfer.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
    },
    /// Export cell embeddings from a stage-2 or stage-3 checkpoint.
    Embed {
        /// Defaults to the latest fine-tuned checkpoint in the output directory.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Cluster embeddings and score them against the labels.
    Evaluate {
        /// Defaults to `<output_dir>/embeddings.csv`.
        #[arg(long, value_name = "FILE")]
        embeddings: Option<PathBuf>,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("TTT_OMICS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("TTT_OMICS_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    }
    .with_overrides(cli.seed, cli.output_dir);
    cfg.validate()?;
    match cli.command {
        Command::Synth => {
            cmd_synth(&cfg)?;
        }
        Command::Preprocess => {
            cmd_preprocess(&cfg)?;
        }
        Command::Train { stage } => {
            let stage = Stage::try_from(stage)?;
            let out = cmd_train(&cfg, stage)?;
            if let Some(last) = out.trace.last() {
                println!("stage {stage} final loss {:.6}", last.loss);
            }
            println!("{}", out.checkpoint.display());
        }
        Command::Embed { checkpoint } => {
            println!("{}", cmd_embed(&cfg, checkpoint.as_deref())?.display());
        }
        Command::Evaluate { embeddings } => {
            let ev = cmd_evaluate(&cfg, embeddings.as_deref())?;
            println!("{}", ev.report.to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
