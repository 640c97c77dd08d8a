//! `kep` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

mod ablate;
mod check;
mod eval;
mod synth;
mod train;
mod tree;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "kep",
    version,
    about = "Knowledge-enhanced image-text alignment toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build or inspect a knowledge tree.
    #[command(subcommand)]
    Tree(tree::TreeCommand),
    /// Generate synthetic corpora.
    #[command(subcommand)]
    Synth(synth::SynthCommand),
    /// Train the knowledge encoder or the aligned encoders.
    #[command(subcommand)]
    Train(train::TrainCommand),
    /// Run retrieval, zero-shot or slide-level evaluation.
    #[command(subcommand)]
    Eval(eval::EvalCommand),
    /// Numerical self-checks.
    #[command(subcommand)]
    Check(check::CheckCommand),
    /// Sweep the distillation weight α on a synthetic corpus.
    AblateAlpha(ablate::AblateAlphaArgs),
    /// Toggle distillation, projection head and metric loss on a synthetic corpus.
    AblateArch(ablate::AblateArchArgs),
}

/// Report destination shared by every verb.
#[derive(Args, Debug, Clone)]
pub(crate) struct OutputArgs {
    /// Also write the JSON report to this file.
    #[arg(long = "out")]
    pub out: Option<PathBuf>,
}

/// A malformed request that parsing alone could not catch.
#[derive(Debug)]
pub(crate) struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A check whose numbers came out wrong.
#[derive(Debug)]
pub(crate) struct NumericFailure(pub String);

impl fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

/// Maps an error chain onto the documented exit codes.
pub fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<kep_core::Error>() {
            return if e.is_numeric() {
                EXIT_NUMERIC
            } else if matches!(e, kep_core::Error::Config(_)) {
                EXIT_USAGE
            } else {
                EXIT_DATA
            };
        }
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if cause.is::<NumericFailure>() {
            return EXIT_NUMERIC;
        }
    }
    EXIT_DATA
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Tree(c) => tree::run(c),
        Command::Synth(c) => synth::run(c),
        Command::Train(c) => train::run(c),
        Command::Eval(c) => eval::run(c),
        Command::Check(c) => check::run(c),
        Command::AblateAlpha(a) => ablate::run_alpha(a),
        Command::AblateArch(a) => ablate::run_arch(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code_for(&e)
        }
    }
}

/// Prints the resolved configuration and seed to stderr.
pub(crate) fn announce<C: Serialize>(command: &str, seed: Option<u64>, config: &C) {
    let config = serde_json::to_string(config).unwrap_or_else(|_| "null".into());
    match seed {
        Some(s) => eprintln!("{command}: seed {s}"),
        None => eprintln!("{command}: no seed"),
    }
    eprintln!("{command}: config {config}");
}

/// Pretty JSON on stdout and, optionally, in a file.
pub(crate) fn emit<T: Serialize>(report: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    println!("{text}");
    if let Some(path) = out {
        std::fs::write(path, format!("{text}\n"))
            .with_context(|| format!("writing report to {}", path.display()))?;
    }
    Ok(())
}

pub(crate) fn load_config(path: Option<&Path>) -> Result<kep_core::TrainConfig> {
    match path {
        Some(p) => Ok(kep_core::corpus_io::read_json(p)?),
        None => Ok(kep_core::TrainConfig::default()),
    }
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
