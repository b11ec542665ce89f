//! `morphreg`: synthetic phantoms, registration, uncertainty maps, receptive
//! field probes and the built-in self-test.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ErfOpts, PhantomOpts, RegisterOpts, SelftestOpts, UncertaintyOpts};

#[derive(Parser)]
#[command(name = "morphreg", version, about = "Deformable 3D image registration on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom image with its label channels
    Phantom {
        /// TOML file with the same keys as the flags
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        opts: PhantomOpts,
    },
    /// Register a moving image onto a fixed image
    Register {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        opts: RegisterOpts,
    },
    /// Register, then build variance and calibrated-error maps from an ensemble
    Uncertainty {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        opts: UncertaintyOpts,
    },
    /// Probe the effective receptive field of a network at one voxel
    Erf {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        opts: ErfOpts,
    },
    /// Run gradient, invertibility, windowing, calibration and identity checks
    Selftest {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        opts: SelftestOpts,
    },
}

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or argument values: exit 1.
    Usage(String),
    /// Missing, malformed or inconsistent input data: exit 2.
    Data(String),
    /// Numerical breakdown or a failed self-test: exit 3.
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<morphreg_core::Error> for CliError {
    fn from(e: morphreg_core::Error) -> Self {
        use morphreg_core::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidArgument(_) => CliError::Usage(msg),
            E::Numerical(_) | E::NonFinite(_) => CliError::Numerical(msg),
            _ if e.is_data_error() => CliError::Data(msg),
            _ => CliError::Numerical(msg),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Phantom { config, opts } => commands::phantom(opts, config.as_deref()),
        Command::Register { config, opts } => commands::register(opts, config.as_deref()),
        Command::Uncertainty { config, opts } => commands::uncertainty(opts, config.as_deref()),
        Command::Erf { config, opts } => commands::erf(opts, config.as_deref()),
        Command::Selftest { config, opts } => commands::selftest(opts, config.as_deref()),
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
            eprintln!("morphreg: {e}");
            ExitCode::from(e.code())
        }
    }
}
