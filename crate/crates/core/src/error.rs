use thiserror::Error;

/// Error type shared by all modules.
///
/// The CLI maps these onto exit codes: usage problems are caught before any
/// `SaakError` exists, `Io`/`Format`/`Domain`/`Config` are data errors, and
/// `Numeric`/`Train` are computation errors.
#[derive(Debug, Error)]
pub enum SaakError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    /// Malformed or inconsistent input data (bad magic, size mismatch, ...).
    #[error("format error: {0}")]
    Format(String),
    /// An operation was called with arguments outside its domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// Invalid or dimensionally inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),
    /// A numerical procedure failed (e.g. eigensolver non-convergence).
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Classifier training failed (e.g. divergence).
    #[error("training error: {0}")]
    Train(String),
}

pub type Result<T> = std::result::Result<T, SaakError>;
