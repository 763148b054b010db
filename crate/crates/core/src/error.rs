use thiserror::Error;

/// Errors produced by model construction, fitting and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unstable dynamics: {0}")]
    UnstableDynamics(String),

    #[error("insufficient co-observation for pair ({i}, {j}) at lag {lag}: count {count}")]
    InsufficientCoObservation {
        i: usize,
        j: usize,
        lag: usize,
        count: u64,
    },

    #[error("lag {lag} exceeds stored maximum lag {max}")]
    LagOutOfRange { lag: usize, max: usize },

    #[error("numerical failure at time index {t}: {msg}")]
    NumericalAt { t: usize, msg: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite gradient in {param} at step {step}")]
    NonFiniteGradient { param: String, step: u64 },

    #[error("rank-deficient input: {0}")]
    RankDeficient(String),

    #[error("alignment underdetermined between sessions {a} and {b}: overlap rank {rank} < {n}")]
    AlignmentUnderdetermined {
        a: usize,
        b: usize,
        rank: usize,
        n: usize,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("I/O failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("EM log-likelihood decreased at iteration {iter}: {prev} -> {next}")]
    LikelihoodDecrease { iter: usize, prev: f64, next: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
