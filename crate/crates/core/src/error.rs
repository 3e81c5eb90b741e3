use thiserror::Error;

/// Errors produced by the simulator and the assimilation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("capacity exceeded: {requested} qubits requested, at most {max} supported")]
    Capacity { requested: usize, max: usize },

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("qubit index {qubit} out of range for a {num_qubits}-qubit register")]
    QubitIndex { qubit: usize, num_qubits: usize },

    #[error("basis index {index} out of range for {num_states} states")]
    BasisIndex { index: usize, num_states: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("covariance is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("trajectory diverged at step {step}")]
    Divergence { step: usize },

    #[error("configuration invalid:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A pipeline stage failed; `partial` holds the diagnostics gathered
    /// by the stages that completed.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        partial: Box<serde_json::Value>,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        if let Error::Stage { source, .. } = self {
            return source.is_validation();
        }
        matches!(
            self,
            Error::Validation(_)
                | Error::Json(_)
                | Error::InvalidArgument(_)
                | Error::Precondition(_)
                | Error::NotPositiveDefinite(_)
                | Error::Capacity { .. }
                | Error::Shape { .. }
        )
    }
}
