use thiserror::Error;

/// Errors produced by fitting, conditioning and sampling routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {index} = {pivot:e})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid indices: {0}")]
    InvalidIndices(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("value outside the domain: {0}")]
    Domain(String),

    #[error("degenerate conditioning: every component density underflows at the conditioning point")]
    DegenerateConditioning,

    #[error("mixture component {component} lost positive definiteness")]
    SingularComponent { component: usize },

    #[error("mixture component {component} has no responsibility mass")]
    EmptyComponent { component: usize },

    #[error("objective became non-finite at iteration {iteration}")]
    NonFiniteObjective { iteration: usize },

    #[error("unsupported shape: {0}")]
    UnsupportedShape(String),

    #[error("only {accepted} of {requested} draws accepted after {draws} proposals")]
    InsufficientAcceptance {
        accepted: usize,
        requested: usize,
        draws: usize,
    },

    #[error("column {column} ({phase}): {source}")]
    Column {
        column: usize,
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("model format: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn in_column(self, column: usize, phase: &'static str) -> Self {
        Error::Column {
            column,
            phase,
            source: Box::new(self),
        }
    }

    /// Innermost error once column context is stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Column { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
