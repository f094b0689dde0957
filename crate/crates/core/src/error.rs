use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("layer `{from}` output {from_shape:?} does not compose with layer `{to}`: {reason}")]
    ShapeComposition {
        from: String,
        from_shape: Vec<usize>,
        to: String,
        reason: String,
    },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value produced by layer `{0}`")]
    NonFinite(String),

    #[error("non-finite gradient at parameter index {0}")]
    NonFiniteGradient(usize),

    #[error("tape was recorded against different parameters; rerun forward")]
    StaleTape,

    #[error("missing captured activation for layer `{0}`")]
    MissingCapture(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid loss configuration: {0}")]
    InvalidLoss(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("round {round}: global weights became non-finite")]
    RoundDiverged { round: usize },

    #[error("student {student}: {source}")]
    Student {
        student: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("dream sample {0}: optimization state became non-finite")]
    DreamDiverged(usize),

    #[error("parameter budget: {0}")]
    Budget(String),

    #[error("infeasible placement: {0}")]
    Infeasible(String),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("corrupt artifact: {0}")]
    Corrupt(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
