//! `vavae`: data generation, tokenizer and diffusion training, sampling,
//! latent analysis and gradient checks driven by one TOML run config.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Ctx;
use crate::config::{one_line, RunConfig};

/// Output root for every relative path in the config.
pub const OUT_ENV: &str = "VAVAE_OUT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("{path} not found ({hint})")]
    Missing { path: String, hint: String },
    #[error(transparent)]
    Data(#[from] vavae_core::data::DataError),
    #[error(transparent)]
    Format(#[from] vavae_core::io::FormatError),
    #[error(transparent)]
    Tokenizer(#[from] vavae_core::tokenizer::TokenizerError),
    #[error(transparent)]
    Dit(#[from] vavae_core::lightningdit::DitError),
    #[error(transparent)]
    Diagnostics(#[from] vavae_core::diagnostics::DiagnosticsError),
    #[error(transparent)]
    Numerics(#[from] vavae_core::NumericsError),
    #[error("failing cases: {0}")]
    GradcheckFailed(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Missing { .. } => "missing",
            CliError::Data(_) => "data",
            CliError::Format(_) => "format",
            CliError::Tokenizer(_) => "tokenizer",
            CliError::Dit(_) => "dit",
            CliError::Diagnostics(_) => "diagnostics",
            CliError::Numerics(_) => "numerics",
            CliError::GradcheckFailed(_) => "gradcheck",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "vavae", version, about = "Foundation-aligned tokenizer and latent diffusion pipeline")]
struct Cli {
    /// TOML run config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set tokenizer.m1=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Worker threads for batch-parallel kernels.
    #[arg(long, default_value_t = 1, global = true)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic image set.
    GenData,
    /// Train the tokenizer and report its losses and latent uniformity.
    TrainVae,
    /// Train the diffusion transformer on tokenizer latents.
    TrainDit,
    /// Sample latents, decode them and write an image grid.
    Sample,
    /// Latent uniformity and reconstruction quality of a tokenizer checkpoint.
    Analyze,
    /// Finite-difference check of every differentiable building block.
    Gradcheck,
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let text = match &cli.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?),
        None => None,
    };
    let cfg = RunConfig::from_sources(text.as_deref(), &cli.set)?;
    let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from);
    let ctx = Ctx {
        cfg,
        root,
        config_file: cli.config,
    };
    match cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::TrainVae => commands::train_vae(&ctx),
        Command::TrainDit => commands::train_dit_cmd(&ctx),
        Command::Sample => commands::sample(&ctx),
        Command::Analyze => commands::analyze(&ctx),
        Command::Gradcheck => commands::gradcheck(&ctx),
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("error kind={} message={:?}", e.kind(), one_line(&e.to_string()));
    ExitCode::from(e.exit_code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return fail(&CliError::Usage(e.render().to_string())),
    };
    match run(cli) {
        Ok(out) => {
            log::info!("done: {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
