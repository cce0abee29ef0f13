//! Library surface of the experiment harness: configuration, run and sweep
//! orchestration, checkpoint and image-file IO. The `trigan` binary is a
//! thin CLI over these modules.

pub mod checkpoint;
pub mod config;
pub mod imgdir;
pub mod pgm;
pub mod run;
pub mod sweep;

/// Harness-level error carrying a printable message.
#[derive(Debug)]
pub struct CliError(String);

impl CliError {
    pub fn new(msg: impl Into<String>) -> Self {
        CliError(msg.into())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CliError {}

impl From<trigan_core::Error> for CliError {
    fn from(e: trigan_core::Error) -> Self {
        CliError(format!("{e}"))
    }
}
