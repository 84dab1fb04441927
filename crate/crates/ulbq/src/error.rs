//! Crate-wide error type.
//!
//! Programmer errors (shape mismatches, malformed op arguments) panic with a
//! message naming the offending shapes; everything that can be triggered by
//! user input — files, configs, corpora, divergent training runs — surfaces
//! as an [`Error`] value.

use std::fmt;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All recoverable failures produced by the library.
#[derive(Debug)]
pub enum Error {
    /// An I/O failure, annotated with the path that produced it.
    Io { path: String, source: std::io::Error },
    /// A checkpoint/packed container that failed validation.
    Corrupt { detail: String },
    /// A malformed or inconsistent experiment configuration.
    Config { detail: String },
    /// A corpus or dataset that cannot support the requested operation.
    Data { detail: String },
    /// Training diverged or produced a non-finite loss.
    Diverged { detail: String },
    /// A required artifact is missing; `hint` names the command that makes it.
    MissingArtifact { detail: String, hint: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, source } => write!(f, "i/o error on {path}: {source}"),
            Error::Corrupt { detail } => write!(f, "corrupt container: {detail}"),
            Error::Config { detail } => write!(f, "invalid config: {detail}"),
            Error::Data { detail } => write!(f, "dataset error: {detail}"),
            Error::Diverged { detail } => write!(f, "training diverged: {detail}"),
            Error::MissingArtifact { detail, hint } => {
                write!(f, "missing artifact: {detail} (run `{hint}` first)")
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    /// Shorthand for a corrupt-container error.
    pub fn corrupt(detail: impl Into<String>) -> Error {
        Error::Corrupt { detail: detail.into() }
    }

    /// Shorthand for a config error.
    pub fn config(detail: impl Into<String>) -> Error {
        Error::Config { detail: detail.into() }
    }

    /// Shorthand for a dataset error.
    pub fn data(detail: impl Into<String>) -> Error {
        Error::Data { detail: detail.into() }
    }

    /// Attach a path to an `std::io::Error`.
    pub fn missing_artifact(detail: impl Into<String>, hint: impl Into<String>) -> Error {
        Error::MissingArtifact { detail: detail.into(), hint: hint.into() }
    }

    /// Stable machine-readable name of the variant, for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Corrupt { .. } => "corrupt",
            Error::Config { .. } => "config",
            Error::Data { .. } => "data",
            Error::Diverged { .. } => "diverged",
            Error::MissingArtifact { .. } => "missing_artifact",
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Error {
        Error::Io { path: path.into(), source }
    }
}
