//! `hoi-compose`: dataset generation, region queries, training, sampling,
//! benchmarking and ablation grids from the command line.
//!
//! Exit codes: 0 on success, 1 on a domain error, 2 on a usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "hoi-compose", version, about = "Interaction-aware human-object composition toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options every run-producing subcommand accepts.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// TOML run configuration; flags override it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set train.learning_rate=0.002`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory receiving every artifact; defaults to `runs/<command>-<unix time>`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with manifest, rejects, stats and splits.
    DatasetGen {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        canvas: Option<usize>,
    },
    /// Query a vision-language model for prompt, object box and interaction region.
    Mrpg {
        #[arg(long, value_name = "PNG")]
        fg: PathBuf,
        #[arg(long, value_name = "PNG")]
        bg: PathBuf,
        /// Replay a fixture instead of calling the network backend.
        #[arg(long, value_name = "FIXTURE")]
        mock: Option<PathBuf>,
        #[arg(long)]
        attempts: Option<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train the toy denoiser on a manifest.
    Train {
        #[arg(long, value_name = "MANIFEST")]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        pretrain_steps: Option<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compose one image from a checkpoint.
    Sample {
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PNG")]
        fg: PathBuf,
        #[arg(long, value_name = "PNG")]
        bg: PathBuf,
        /// Interaction spec JSON (as printed by `mrpg`).
        #[arg(long, value_name = "JSON", conflicts_with = "mock")]
        spec: Option<PathBuf>,
        #[arg(long, value_name = "FIXTURE")]
        mock: Option<PathBuf>,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Write per-block, per-head attention maps as PNGs.
        #[arg(long)]
        dump_attention: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Generate and score every manifest record.
    Bench {
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "MANIFEST")]
        data: PathBuf,
        #[arg(long, value_name = "FIXTURE")]
        mock: Option<PathBuf>,
        /// Comma-separated sampling seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train and benchmark one cell per value of an ablation axis.
    Ablate {
        #[arg(long, value_name = "MANIFEST")]
        data: PathBuf,
        /// Evaluation manifest; defaults to `--data`.
        #[arg(long, value_name = "MANIFEST")]
        bench: Option<PathBuf>,
        #[arg(long, value_enum)]
        axis: commands::Axis,
        /// Axis values: `off,on`; `residual,non_residual`; `1,3,6`; `1,3.5`;
        /// coefficient sets as `a1:a2:a3:a` separated by commas.
        #[arg(long)]
        values: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        pretrain_steps: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Check every record of a manifest.
    Validate {
        manifest: PathBuf,
    },
}

/// How a command failed.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Domain(hoi_compose::Error),
}

impl From<hoi_compose::Error> for Failure {
    fn from(e: hoi_compose::Error) -> Self {
        Failure::Domain(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
