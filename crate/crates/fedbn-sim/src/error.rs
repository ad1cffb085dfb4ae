use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {off:.3e})")]
    NotConverged { sweeps: usize, off: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rank-deficient input: {0}")]
    RankDeficient(String),

    #[error("samples must be ordered by ascending client id (row {row} has client {found} after client {previous})")]
    SampleOrdering {
        row: usize,
        found: usize,
        previous: usize,
    },

    #[error("structural mismatch between parameter records: {0}")]
    StructuralMismatch(String),

    #[error("training diverged at round {round}, epoch {epoch}, client {client} (loss {loss:.3e})")]
    Divergence {
        round: usize,
        epoch: usize,
        client: usize,
        loss: f64,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
