mod commands;
mod config;
mod error;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use c3r::eval::Level;
use clap::{Args, Parser, Subcommand};

use commands::{Common, EmbedFlags, EvalFlags};
use error::CliResult;

/// Channel-adaptive cell encoders: synthetic data, training and evaluation.
#[derive(Debug, Parser)]
#[command(name = "c3r", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML config; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl From<CommonArgs> for Common {
    fn from(a: CommonArgs) -> Self {
        Common {
            config: a.config,
            seed: a.seed,
            out: a.out,
        }
    }
}

fn parse_level(s: &str) -> Result<Level, String> {
    match s {
        "cell" => Ok(Level::Cell),
        "fov" => Ok(Level::Fov),
        "well" => Ok(Level::Well),
        _ => Err(format!("`{s}` is not one of cell, fov, well")),
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train an encoder by self-distillation.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write embeddings of a dataset with a trained checkpoint.
    Embed {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Context channel to remove; repeat for several.
        #[arg(long)]
        drop: Vec<String>,
        /// Swap the group branches.
        #[arg(long)]
        flip: bool,
        #[arg(long, value_parser = parse_level)]
        level: Option<Level>,
    },
    /// Probe, retrieval, flip, limited-context and cosine evaluations.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        drop: Vec<String>,
        #[arg(long)]
        flip: bool,
    },
    /// Channel parity and entropy statistics.
    Analyze {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write a manifest with the suggested roles.
        #[arg(long)]
        write_manifest: bool,
    },
    /// Render metrics.jsonl and report.json files as SVG.
    Plot {
        #[arg(long)]
        out: PathBuf,
        files: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen { common } => commands::gen(&common.into()),
        Command::Train { common, data } => commands::train_cmd(&common.into(), data),
        Command::Embed {
            common,
            data,
            checkpoint,
            drop,
            flip,
            level,
        } => commands::embed_cmd(
            &common.into(),
            EmbedFlags {
                data,
                checkpoint,
                drop,
                flip,
                level,
            },
        ),
        Command::Eval {
            common,
            data,
            checkpoint,
            drop,
            flip,
        } => commands::eval_cmd(
            &common.into(),
            EvalFlags {
                data,
                checkpoint,
                drop,
                flip,
            },
        ),
        Command::Analyze {
            common,
            data,
            write_manifest,
        } => commands::analyze_cmd(&common.into(), data, write_manifest),
        Command::Plot { out, files } => commands::plot_cmd(&out, &files),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
