//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch between arrays; both shapes are named.
    #[error("dimension mismatch: {context} ({lhs:?} vs {rhs:?})")]
    Dimension {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Value outside the mathematical domain of an operation (e.g. log of a
    /// non-positive number).
    #[error("domain error: {0}")]
    Domain(String),

    /// A class index or similar discrete index out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// An API contract was violated (empty batch, non-scalar backward root, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A requested combination is mathematically infeasible (e.g. P > n!).
    #[error("infeasible request: {0}")]
    Infeasible(String),

    /// Distinct-sample pool exhausted while generating permutations.
    #[error("pool exhausted: {0}")]
    Pool(String),

    /// Parse failure in an input file, with the offending line when known.
    #[error("parse error in {file} (line {line}): {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite value where a finite one is required (inputs or losses).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A metric is undefined for the given inputs (e.g. single-class scores).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(context: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            context: context.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
