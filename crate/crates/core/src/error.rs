use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("cell is empty")]
    EmptyCell,

    #[error("too few points in cell: n_k = {n}, alpha = {alpha} gives rank index 0")]
    TooFewPoints { n: usize, alpha: f64 },

    #[error("no training data")]
    NoData,

    #[error("point is not on the manifold: {0:?}")]
    OffManifold(Vec<f64>),

    #[error("breakpoints on axis {axis} are not strictly increasing")]
    NonMonotoneBreaks { axis: usize },

    #[error("covariate {0:?} lies outside the partition")]
    OutsidePartition(Vec<f64>),

    #[error("series has zero variance")]
    ZeroVariance,

    #[error("prediction set is empty")]
    EmptySet,

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        let line = err.position().map(|p| p.line()).unwrap_or(0);
        match err.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse {
                line,
                message: format!("{other:?}"),
            },
        }
    }
}
