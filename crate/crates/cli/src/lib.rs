//! Command-line front end for the matching pipeline.

mod args;
mod commands;

use std::io::Write;
use std::process::ExitCode;

pub use args::{Cli, Command, BUILD_ID};
use clap::Parser;
use ufm_core::ErrorKind;

/// Error raised by the front end itself for bad flag combinations.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub(crate) fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Exit class of an error chain: 1 usage, 2 data or format, 3 numeric.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ufm_core::Error>() {
            return match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            };
        }
    }
    2
}

/// Writes one JSON line describing `err` to standard error.
pub fn report_error(err: &anyhow::Error) {
    let code = exit_code(err);
    let class = match code {
        1 => "usage",
        3 => "numeric",
        _ => "data",
    };
    let line = serde_json::json!({
        "error": class,
        "code": code,
        "message": format!("{err:#}"),
    });
    let _ = writeln!(std::io::stderr(), "{line}");
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            report_error(&usage(msg.lines().next().unwrap_or_default().trim_start_matches("error: ")));
            return ExitCode::from(1);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::from(exit_code(&e))
        }
    }
}
