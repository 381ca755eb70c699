//! `srafte`: data generation, two-phase training, forecasting, evaluation and
//! report tables for coarse-solver + learned-lift surrogates.

mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;
use mimalloc::MiMalloc;
use srafte_core::Error as CoreError;

use crate::args::{Cli, Command};

// Training allocates and frees large activation buffers every step; the
// system allocator returns them to the OS each time.
#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

/// Invalid flags, missing inputs or conflicting options.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGENCE: u8 = 3;
pub const EXIT_CHECKSUM: u8 = 4;

fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return (EXIT_CONFIG, "config");
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            let root = e.root();
            return match root {
                _ if root.is_divergence() => (EXIT_DIVERGENCE, "divergence"),
                CoreError::Checksum { .. } | CoreError::Truncated { .. } | CoreError::Format { .. } => {
                    (EXIT_CHECKSUM, "integrity")
                }
                CoreError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                    (EXIT_CONFIG, "missing-input")
                }
                CoreError::Io { .. } | CoreError::Json { .. } => (1, "io"),
                _ => (EXIT_CONFIG, "config"),
            };
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if e.kind() == std::io::ErrorKind::NotFound {
                return (EXIT_CONFIG, "missing-input");
            }
        }
    }
    (1, "internal")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Forecast(a) => commands::forecast(a),
        Command::Eval(a) => commands::eval(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            let line = serde_json::json!({
                "error": kind,
                "exit_code": code,
                "message": format!("{e:#}"),
            });
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
