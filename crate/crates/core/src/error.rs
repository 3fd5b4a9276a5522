use std::path::PathBuf;

use crate::selection::SelectionCurve;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-positive signal {signal} at b = {b}")]
    NonPositiveSignal { b: f64, signal: f64 },

    #[error("degenerate design: need at least two distinct b-values, got {distinct}")]
    DegenerateDesign { distinct: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("over-parameterised: {informative_cells} informative cells but {parameters} free parameters")]
    OverParameterised {
        informative_cells: usize,
        parameters: usize,
    },

    #[error("model selection failed: every candidate was degenerate")]
    SelectionFailed { curve: Box<SelectionCurve> },

    #[error("undefined summary: {0}")]
    UndefinedSummary(String),

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("internal consistency: {0}")]
    InternalConsistency(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's data rather than by the analysis.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::SelectionFailed { .. }
                | Error::InternalConsistency(_)
                | Error::DegenerateVariance(_)
        )
    }
}
