//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A factorization or update produced a non-finite or non-positive
    /// quantity; the context string names the iteration, observation, and
    /// component involved.
    #[error("numerical breakdown: {context}")]
    NumericalBreakdown { context: String },

    /// Parameters violate their domain (weights off the simplex, tau outside
    /// (0.5, 1), eta <= 1, non-finite entries, ...).
    #[error("parameter domain violation: {0}")]
    ParameterDomain(String),

    /// A mixture component lost all of its observations.
    #[error("component {group} has no assigned observations")]
    EmptyComponent { group: usize },

    /// Every restart of a fit failed; carries one reason per restart.
    #[error("all {} restarts failed: {}", reasons.len(), reasons.join("; "))]
    FitFailed { reasons: Vec<String> },

    /// Every cell of a model-selection grid failed.
    #[error("no (G, D) cell could be fitted")]
    SelectionFailed,

    /// The quadrature likelihood oracle only supports small latent dimensions.
    #[error("latent dimension {d} unsupported here (max {max})")]
    UnsupportedDimension { d: usize, max: usize },

    /// Malformed input file; coordinates are 1-based file row and column.
    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    /// A serialized document carries an unexpected format version or kind.
    #[error("unsupported document: expected {expected}, found {found}")]
    Version { expected: String, found: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid JSON in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn breakdown(context: impl Into<String>) -> Self {
        Error::NumericalBreakdown {
            context: context.into(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
