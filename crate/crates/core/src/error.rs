use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("point {index} lacks a full stencil: {detail}")]
    OutOfStencil { index: usize, detail: String },

    #[error("containment violated: {0}")]
    Containment(String),

    #[error("hamiltonian contract violated: {0}")]
    HamiltonianContract(String),

    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unknown identifier `{name}` at line {line}, column {column}")]
    UnknownIdentifier {
        name: String,
        line: usize,
        column: usize,
    },

    #[error("`{func}` expects {expected} argument(s), got {got} (line {line}, column {column})")]
    Arity {
        func: String,
        expected: String,
        got: usize,
        line: usize,
        column: usize,
    },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("boundary condition violated: {0}")]
    BoundaryCondition(String),

    #[error("unknown gallery entry `{0}`")]
    UnknownName(String),

    #[error("hypothesis not met: {0}")]
    HypothesisNotMet(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
