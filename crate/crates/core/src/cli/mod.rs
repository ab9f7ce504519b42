//! Command-line pipeline: data generation, training, tokenization, assembly
//! and evaluation. Every command reads one [`RunConfig`] and writes under its
//! output directory.
//!
//! Exit codes: 0 success, 2 config or validation error, 3 missing
//! prerequisite, 4 numerical failure, 1 anything else.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{run, stage_seed, Layout};
pub use config::{AssembleConfig, DataConfig, EvaluateConfig, RunConfig};

use crate::assembler::AssemblyError;
use crate::gradcore::GradError;
use crate::petrosim::PetroError;
use crate::seqmodel::SeqError;
use crate::voxcore::VoxError;
use crate::vqvae::VqvaeError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error in {field}: {msg}")]
    Config { field: String, msg: String },
    #[error("missing prerequisite: {}", .0.display())]
    Missing(PathBuf),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Missing(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Failed(_) | CliError::Io(_) => 1,
        }
    }

    fn config(field: &str, err: impl std::fmt::Display) -> Self {
        CliError::Config {
            field: field.to_string(),
            msg: err.to_string(),
        }
    }
}

impl From<GradError> for CliError {
    fn from(e: GradError) -> Self {
        match e {
            GradError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<VoxError> for CliError {
    fn from(e: VoxError) -> Self {
        match e {
            VoxError::Io(io) => CliError::Io(io),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<VqvaeError> for CliError {
    fn from(e: VqvaeError) -> Self {
        match e {
            VqvaeError::NonFinite(_) => CliError::Numerical(e.to_string()),
            VqvaeError::Config(_) => CliError::config("vqvae", e),
            VqvaeError::Grad(g) => g.into(),
            VqvaeError::Vox(v) => v.into(),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<SeqError> for CliError {
    fn from(e: SeqError) -> Self {
        match e {
            SeqError::NonFinite(_) => CliError::Numerical(e.to_string()),
            SeqError::Config(_) => CliError::config("transformer", e),
            SeqError::Grad(g) => g.into(),
            SeqError::Io(io) => CliError::Io(io),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<PetroError> for CliError {
    fn from(e: PetroError) -> Self {
        match e {
            PetroError::NotConverged { .. } => CliError::Numerical(e.to_string()),
            PetroError::Invalid(_) => CliError::config("evaluate", e),
            PetroError::NonPercolatingReference => CliError::Failed(e.to_string()),
        }
    }
}

impl From<AssemblyError> for CliError {
    fn from(e: AssemblyError) -> Self {
        use AssemblyError::*;
        match e {
            Seq(s) => s.into(),
            Vqvae(v) => v.into(),
            Vox(v) => v.into(),
            Io(io) => CliError::Io(io),
            EmptyGrid(_) | WindowTooLarge { .. } | WindowSets { .. } | BlockSize { .. } | SetSize { .. }
            | Vocab { .. } | NotDivisible { .. } | WindowTiling { .. } => CliError::config("assemble", e),
            MissingPredecessor { .. } | OrderViolation { .. } | OutOfGrid { .. } => CliError::Failed(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "poregen", version, about = "Generate and evaluate 3D porous media")]
pub struct Args {
    #[command(subcommand)]
    pub command: Command,
    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    /// Synthesize training volumes and their porosity grids.
    GenData,
    /// Train the autoencoder on patches of the generated volumes.
    TrainVqvae,
    /// Tokenize the generated volumes into a training set for the transformer.
    Encode,
    /// Train the transformer on the tokenized dataset.
    TrainTransformer,
    /// Generate a volume from a porosity grid.
    Assemble,
    /// Porosity, two-point probability and permeability of a volume.
    Evaluate,
    /// Finite-difference check of every differentiable op.
    Gradcheck,
}

/// Resolves the config for parsed arguments.
pub fn resolve_config(args: &Args) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(dir) = &args.out {
        cfg = cfg.with_out(dir);
    }
    Ok(cfg)
}

/// Runs the command line in `argv` and returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match resolve_config(&args).and_then(|cfg| run(args.command, &cfg)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
