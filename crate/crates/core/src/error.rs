use thiserror::Error;

/// Errors raised by the engine, the epilogue primitives, the auxiliary
/// reductions and the container format.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing binding for operand `{0}`")]
    Binding(String),

    #[error("invalid epilogue program: {0}")]
    Program(String),

    #[error("pairwise primitive needs an even tile width, got {0}")]
    Pairing(usize),

    #[error("label {label} at row {row} is outside [0, {classes})")]
    Label { row: usize, label: usize, classes: usize },

    #[error("reference has zero Frobenius norm")]
    DegenerateReference,

    #[error("row {0} has no data to reduce")]
    DegenerateRow(usize),

    #[error("row {0} never received its target logit")]
    MissingGather(usize),

    #[error("tape is missing `{0}`")]
    Tape(&'static str),

    #[error("non-finite function value while probing element {0}")]
    Probe(usize),

    #[error("malformed tensor container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
