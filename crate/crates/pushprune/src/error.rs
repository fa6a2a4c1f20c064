use thiserror::Error;

/// Errors surfaced by tensor math, network construction, data ingestion and
/// the compression pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or extent disagreement between operands.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller violated an operation's contract (wrong rank, empty input,
    /// out-of-range label, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Cholesky factorization hit a non-positive pivot; the matrix is not
    /// positive-definite. `minor` is the 1-based order of the offending
    /// leading principal minor.
    #[error("matrix not positive-definite: leading minor of order {minor} is not positive")]
    Singular { minor: usize },

    /// A network spec failed validation; all violations are listed.
    #[error("invalid network spec:\n{}", .0.join("\n"))]
    Validation(Vec<String>),

    /// Binary/textual format parse failure with the byte offset where the
    /// input stopped making sense.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// Checkpoint checksum or version mismatch.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Configuration file or key problem.
    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss; carries a diagnostic snapshot.
    #[error("numeric abort: {0}")]
    NumericAbort(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
