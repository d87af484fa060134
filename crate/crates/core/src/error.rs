use thiserror::Error;

/// Errors raised by the estimator library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not skew-symmetric (max asymmetry {0:e})")]
    NotSkewSymmetric(f64),

    #[error("timestamps must be strictly increasing: {prev} then {next}")]
    NonIncreasingStamp { prev: f64, next: f64 },

    #[error("range offset {dt} is outside the step (0, {step}]")]
    OffsetOutsideStep { dt: f64, step: f64 },

    #[error("degenerate range geometry: predicted antenna-anchor distance {0:e} m")]
    DegenerateRange(f64),

    #[error("problem has no factors")]
    EmptyProblem,

    #[error("invalid sliding window: {0}")]
    InvalidWindow(String),

    #[error("every candidate solve failed")]
    AllSolvesFailed,

    #[error("anchor geometry is degenerate: {0}")]
    DegenerateAnchors(String),

    #[error("missing inter-anchor distance samples for pair ({0}, {1})")]
    MissingAnchorPair(u32, u32),

    #[error("time {t} outside trajectory span [0, {duration}]")]
    TimeOutOfRange { t: f64, duration: f64 },

    #[error("too few matched poses for evaluation: {0}")]
    TooFewMatches(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: u64,
        msg: String,
    },

    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
