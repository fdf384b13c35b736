//! Error type shared by the whole pipeline.
//!
//! Variants are grouped by the CLI exit-code contract: configuration problems
//! exit with code 2, numerical/solver failures with code 3.

use thiserror::Error;

/// All failures the library can report.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (unsupported orders, unknown
    /// tags, bad tolerances, malformed input files).
    #[error("configuration error: {0}")]
    Config(String),

    /// A mesh node could not be attributed to any geometry patch, or a patch
    /// inversion failed.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Local or global assembly failure (singular elemental Jacobian, index
    /// out of range).
    #[error("assembly error: {0}")]
    Assembly(String),

    /// Linear or nonlinear solver failure (singular system, nonconvergence).
    #[error("solver error: {0}")]
    Solver(String),

    /// Persistence-format violation (bad magic, truncated file, version
    /// mismatch).
    #[error("format error: {0}")]
    Format(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code for the CLI: 2 for configuration errors, 3 for solver and
    /// numerical errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format(_) | Error::Io(_) => 2,
            Error::Geometry(_) | Error::Assembly(_) | Error::Solver(_) => 3,
        }
    }
}
