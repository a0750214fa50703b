use thiserror::Error;

/// Error taxonomy shared by the whole engine.
///
/// The CLI maps these onto its stable exit-code contract:
/// config errors -> 2, numeric aborts -> 3, I/O and integrity errors -> 4.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or malformed config file.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid direct input to an operation (empty name, all-pad tokens, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Shape mismatch, missing key, duplicate name and similar structural faults.
    #[error("structural error: {0}")]
    Structural(String),

    /// Non-finite value encountered during numeric work.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Operation invoked outside the sequential-task contract.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Corrupt, truncated or version-mismatched artifact file.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wrap an I/O error with the path or operation it came from.
    pub fn io_context(context: impl std::fmt::Display, err: std::io::Error) -> Error {
        Error::Io(std::io::Error::new(err.kind(), format!("{context}: {err}")))
    }

    /// Exit code for the CLI contract (0 = success is implied elsewhere).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) | Error::Structural(_) | Error::Protocol(_) => 2,
            Error::Numeric(_) => 3,
            Error::Integrity(_) | Error::Io(_) => 4,
        }
    }
}
