use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gaitflow::pipeline::{self, PipelineConfig};

/// Gait recognition from dense optical flow on body-part patches.
///
/// Configuration comes from `--config` (TOML), then `GAITFLOW_SECTION__KEY`
/// environment variables, then `--set section.key=value` flags.
#[derive(Parser)]
#[command(name = "gaitflow", version)]
struct Cli {
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.learning_rate=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic walker corpus to `corpus_root`.
    Synth {
        #[arg(long)]
        overwrite: bool,
    },
    /// Precompute and cache flow for every corpus video.
    Flow,
    /// Train on the training subjects and write a checkpoint directory.
    Train {
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract descriptors of the evaluation subjects.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Descriptor store path; a CSV copy is written beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Identification and verification report from a descriptor store.
    Evaluate {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with `--config`, evaluate on the corpus of `--eval-config`.
    Transfer {
        #[arg(long)]
        eval_config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective configuration.
    Config,
}

fn run(cli: Cli) -> gaitflow::Result<()> {
    let cfg = PipelineConfig::load_with(cli.config.as_deref(), &cli.sets)?;
    match cli.command {
        Command::Synth { overwrite } => {
            let m = pipeline::cmd_synth(&cfg, overwrite)?;
            println!("{} videos, manifest digest {}", m.videos.len(), m.digest());
        }
        Command::Flow => {
            println!("{} videos", pipeline::cmd_flow(&cfg)?);
        }
        Command::Train { out } => {
            let o = pipeline::cmd_train(&cfg, &out)?;
            if let Some(last) = o.log.last() {
                println!("{last}");
            }
        }
        Command::Extract { checkpoint, out } => {
            let s = pipeline::cmd_extract(&cfg, &checkpoint, &out)?;
            println!("{} videos extracted, {} skipped", s.videos, s.skipped);
        }
        Command::Evaluate { store, out } => {
            print!("{}", pipeline::cmd_evaluate(&cfg, &store, &out)?.to_toml()?);
        }
        Command::Transfer { eval_config, out } => {
            let eval = PipelineConfig::load_with(Some(&eval_config), &cli.sets)?;
            print!("{}", pipeline::cmd_transfer(&cfg, &eval, &out)?.to_toml()?);
        }
        Command::Config => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
