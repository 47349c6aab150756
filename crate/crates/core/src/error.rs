use thiserror::Error;

/// Errors produced by construction and query operations.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid interval [{lo}, {hi}] for k = {k}")]
    InvalidInterval { lo: usize, hi: usize, k: usize },

    #[error("target sequence violates the Leibniz bound at index {index}: q({index}) = {value} exceeds {bound}")]
    LeibnizViolation {
        index: usize,
        value: usize,
        bound: usize,
    },

    #[error("decomposition search exhausted for q = {q:?} (budget: {max_blocks} blocks, m <= {max_m}, d <= {max_d})")]
    SearchExhausted {
        q: Vec<usize>,
        max_blocks: usize,
        max_m: usize,
        max_d: usize,
    },

    #[error("sampled vector sets failed the independence check after {attempts} attempts")]
    IndependenceFailure { attempts: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
