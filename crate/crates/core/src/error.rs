use thiserror::Error;

/// Failures raised by the linear algebra, expansion and counting routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("state has zero norm")]
    ZeroState,

    #[error("no direction left orthogonal to the excluded vectors in dimension {dim}")]
    NoFreeDirection { dim: usize },

    #[error("dimension too small: need {needed}, have {available}")]
    DimensionTooSmall { needed: usize, available: usize },

    #[error("cannot peel amplitude {amplitude} from a vector of norm {norm}")]
    PeelUnderflow { norm: f64, amplitude: f64 },

    #[error("operator is not a projector (hermiticity {hermiticity:.3e}, idempotence {idempotence:.3e})")]
    NotProjector { hermiticity: f64, idempotence: f64 },

    #[error("operator is not unitary (deviation {deviation:.3e})")]
    NotUnitary { deviation: f64 },

    #[error("operator is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("invalid microstate pair ({i}, {j}) for n = {n}")]
    InvalidPair { i: usize, j: usize, n: usize },

    #[error("invalid tolerance: rel = {rel}, abs = {abs}")]
    InvalidTolerance { rel: f64, abs: f64 },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
