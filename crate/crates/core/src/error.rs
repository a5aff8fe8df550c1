use thiserror::Error;

/// Errors surfaced by fitting, simulation, ingestion and the statistics helpers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("observation set is empty")]
    EmptyObservations,

    #[error("non-finite rating {value} for rater {rater} on note {note}")]
    NonFiniteRating { rater: String, note: String, value: f64 },

    #[error("{what}: expected length {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
