//! The `tek` command line: ingestion, retrieval, packing, masking,
//! training, evaluation and the budget ablation, driven by flags and an
//! optional TOML run configuration.

mod args;
mod commands;
pub mod config;
mod manifest;

use std::ffi::OsString;
use std::fmt;

use clap::Parser;

pub use args::Cli;
pub use config::RunConfig;

/// Version recorded in run manifests.
pub const VERSION: &str = match option_env!("TEK_GIT_DESCRIBE") {
    Some(v) => v,
    None => concat!("v", env!("CARGO_PKG_VERSION")),
};

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: missing flag, missing path, invalid config. Exit 2.
    Usage(String),
    /// A pipeline stage failed. Exit 1.
    Stage { stage: &'static str, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Stage { .. } => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Stage { stage, message } => write!(f, "error: stage {stage} failed: {message}"),
        }
    }
}

/// Wraps any displayable error as a failure of `stage`.
pub(crate) fn stage<E: fmt::Display>(stage: &'static str) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Stage {
        stage,
        message: e.to_string(),
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();
}

/// Parses `argv` and runs the selected subcommand; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_logging(cli.verbose);
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
