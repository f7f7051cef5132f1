use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("malformed tape: node {node} references later node {arg}")]
    CycleDetected { node: usize, arg: usize },

    #[error("measurement grid is degenerate: {0}")]
    DegenerateGrid(String),

    #[error("Schur complement lost positive definiteness ({block} block)")]
    SchurNotPD { block: &'static str },

    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("realization {realization}: {source}")]
    AtRealization {
        realization: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("placement error: {0}")]
    Placement(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("reference signal is identically zero")]
    ZeroReference,

    #[error(
        "parse error{}{}: {message}",
        line.map(|l| format!(" at line {l}")).unwrap_or_default(),
        key.as_ref().map(|k| format!(" (key `{k}`)")).unwrap_or_default()
    )]
    Parse {
        key: Option<String>,
        line: Option<usize>,
        message: String,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable variant name of the innermost error, for machine-readable output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NotPositiveDefinite { .. } => "NotPositiveDefinite",
            Error::NotSymmetric(_) => "NotSymmetric",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::CycleDetected { .. } => "CycleDetected",
            Error::DegenerateGrid(_) => "DegenerateGrid",
            Error::SchurNotPD { .. } => "SchurNotPD",
            Error::NonFiniteGradient { .. } => "NonFiniteGradient",
            Error::AtStep { source, .. } | Error::AtRealization { source, .. } => source.kind(),
            Error::Placement(_) => "Placement",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::ZeroReference => "ZeroReference",
            Error::Parse { .. } => "Parse",
            Error::Format(_) => "Format",
            Error::Io(_) => "Io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
