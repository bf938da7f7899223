use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A data row violated the evidence contract. Rows are 1-based and count
    /// the header, so the first data row is row 2.
    #[error("{msg}, row {row}")]
    Row { row: usize, msg: String },

    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("no records")]
    NoRecords,

    #[error("unknown indication `{0}`")]
    UnknownIndication(String),

    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch in `{block}`: expected {expected}, got {got}")]
    Dimension { block: String, expected: usize, got: usize },

    #[error("non-finite log density at initialization (block `{block}`) after {attempts} attempts")]
    Initialization { block: String, attempts: usize },

    #[error("{0}")]
    Prediction(String),

    #[error("quadrature box too small: boundary mass {mass:.3e}")]
    QuadratureBox { mass: f64 },

    #[error("model not reducible for the quadrature oracle: {0}")]
    UnsupportedOracle(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("{0}")]
    Diagnostics(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
