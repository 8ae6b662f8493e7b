//! Command-line driver: dataset generation, training, leave-one-domain-out
//! evaluation, sweeps, embedding analysis and gradient checks, all driven by
//! a TOML run config.
//!
//! Exit codes: 0 success, 1 config or IO error, 2 numeric failure,
//! 3 verification failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;

pub use config::{build_dataset, load_config, parse_config, DatasetKind, RunConfig};
pub use crossgrad::{
    DomainDataset, Error as CoreError, Method, NetConfig, Tensor, TrainerConfig,
};

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Config(String),
    Io(String),
    Numeric(String),
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Verification(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Numeric(m) | CliError::Verification(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.message())
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            CoreError::Io(_) => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "crossgrad", version, about = "Cross-gradient training for domain generalization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model on the configured split.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to `eval.out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Leave-one-domain-out evaluation over methods and seeds.
    Lodo {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated methods, overriding `eval.methods`.
        #[arg(long)]
        methods: Option<String>,
        /// Number of seeds, overriding `eval.seeds`.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full (α, ε) grid on the configured validation domains.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export domain embeddings and their PCA, and score their geometry.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Also embed inputs perturbed along the domain-loss gradient, with
        /// this ε on the training scale (a batch of `trainer.batch_size`).
        #[arg(long)]
        perturb: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every op plus the input-gradient identity.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        configs: usize,
        #[arg(long, default_value_t = 100)]
        nets: usize,
        /// Corrupt one op's backward rule (self-test of the checker).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write the configured dataset as CSV.
    Export {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Reports go to `out`, errors to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return 1;
            }
            let _ = write!(out, "{e}");
            return 0;
        }
    };
    match commands::dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
