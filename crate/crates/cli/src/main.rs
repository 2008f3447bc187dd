mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Exit codes: 0 success, 1 usage or configuration, 2 data, 3 numeric
/// failure (divergence or a failed gradient check).
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl From<aplearn_core::Error> for Failure {
    fn from(e: aplearn_core::Error) -> Self {
        use aplearn_core::Error as E;
        let code = match e {
            E::Io { .. } | E::Format { .. } | E::Precondition(_) => 2,
            E::Numeric(_) => 3,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

#[derive(Parser)]
#[command(name = "aplearn", version, about = "Train and evaluate patch descriptors with a listwise average-precision loss")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a descriptor model; writes model.apl and train.log into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides sgd.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint (or a freshly initialized model) on the configured tasks.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required_unless_present = "random_init")]
        checkpoint: Option<PathBuf>,
        /// Evaluate an untrained model built from the config.
        #[arg(long, conflicts_with = "checkpoint")]
        random_init: bool,
        #[arg(long)]
        out: PathBuf,
        /// Overrides eval.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Mine in-sequence distractors; writes one label file per sequence into --out.
    Mine {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides sgd.seed, which also seeds clustering.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic and finite-difference gradients of every differentiable component.
    Gradcheck {
        /// TOML with keys seed, loss_batches, histograms.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the JSON lines to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Perturb the analytic gradient of one check (self-test of the harness).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config, out, seed } => {
            let mut cfg = config::RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.sgd.seed = s;
            }
            commands::train(&cfg, &out)
        }
        Command::Eval { config, checkpoint, random_init: _, out, seed } => {
            let mut cfg = config::RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.eval.seed = s;
            }
            commands::eval(&cfg, checkpoint.as_deref(), &out)
        }
        Command::Mine { config, out, seed } => {
            let mut cfg = config::RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.sgd.seed = s;
            }
            commands::mine(&cfg, &out)
        }
        Command::Gradcheck { config, seed, out, corrupt } => commands::gradcheck(config.as_deref(), seed, out.as_deref(), corrupt),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
