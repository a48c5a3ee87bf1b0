use thiserror::Error;

/// Errors raised by numerical and structural operations across the crate.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    /// A matrix that must be positive definite failed its Cholesky
    /// factorization even after the jitter retry; usually signals an
    /// invalid covariance assembled upstream.
    #[error("matrix not positive definite in {op}: pivot {pivot} at index {index}")]
    NotPositiveDefinite {
        op: &'static str,
        pivot: f64,
        index: usize,
    },

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    /// backward() requires a shape-[1] root.
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    /// Edge list does not form a connected acyclic graph, or table
    /// dimensions disagree with node cardinalities.
    #[error("malformed tree: {0}")]
    MalformedTree(String),

    /// Two tree-structured objects that must share topology do not.
    #[error("tree structure mismatch: {0}")]
    StructureMismatch(String),

    /// KL(q || p) with q positive where p has zero mass.
    #[error("infinite KL: q positive where p is zero ({0})")]
    InfiniteKL(String),

    /// Exhaustive enumeration requested beyond the supported state count.
    #[error("state space too large: {states} states exceeds limit {limit}")]
    TooLarge { states: u64, limit: u64 },

    #[error("Poisson likelihood requires non-negative counts, got {0}")]
    NegativeCount(f64),

    #[error("targets have zero variance in dimension {0}")]
    ZeroVariance(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
