//! The `cirm` command line: world and data generation, model and realigner
//! training, trajectory simulation, benchmark suites, ablations, export and
//! the HTTP service.
//!
//! Every command writes only inside the output directory (`--out`, default
//! from `CIRM_OUT_DIR`). A `--config file.json` object supplies flag values
//! by name; flags given on the command line win.

mod args;
mod commands;
mod config;

use std::ffi::OsString;
use std::io::Write;

pub use args::{Cli, Command};
pub use commands::dispatch;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] cirm_core::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
    #[error("benchmark had {0} failing cell(s)")]
    FailedCells(usize),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(_) => "core",
            CliError::Io { .. } => "io",
            CliError::Json(_) => "json",
            CliError::Config(_) => "config",
            CliError::Invalid(_) => "invalid_argument",
            CliError::FailedCells(_) => "failed_cells",
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the exit
/// code: 0 on success, 1 on failure (a JSON error on stderr), 2 on usage
/// errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let raw: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv = match config::merge_config_file(raw) {
        Ok(a) => a,
        Err(e) => return report(&e),
    };
    let cli = match <Cli as clap::Parser>::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => report(&e),
    }
}

fn report(e: &CliError) -> i32 {
    let body = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
    let _ = writeln!(std::io::stderr(), "{body}");
    1
}
