use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("vector has zero norm")]
    ZeroVector,

    #[error("mask selects no positions")]
    AllZeroMask,

    #[error("eigensolver did not converge within {sweeps} sweeps")]
    ConvergenceFailure { sweeps: usize },

    #[error("bipartition left one side empty")]
    EmptyPartition,

    #[error("normalized cut has a zero denominator")]
    ZeroDenominator,

    #[error("ground truth and prediction are both empty")]
    EmptyGroundTruth,

    #[error("box ({top}, {left})-({bottom}, {right}) lies outside a {height}x{width} grid")]
    OutOfBounds {
        top: usize,
        left: usize,
        bottom: usize,
        right: usize,
        height: usize,
        width: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("sample {index}: {source}")]
    Sample { index: usize, source: Box<Error> },

    #[error("similarity map ({row}, {col}): {source}")]
    Pair { row: usize, col: usize, source: Box<Error> },

    #[error("epoch {epoch}, batch {batch}: {source}")]
    Training {
        epoch: usize,
        batch: usize,
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_sample(self, index: usize) -> Self {
        Error::Sample {
            index,
            source: Box::new(self),
        }
    }

    /// True when the root cause is numerical (as opposed to bad shapes or config).
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite(_) | Error::ZeroVector | Error::ConvergenceFailure { .. } | Error::ZeroDenominator => true,
            Error::Sample { source, .. } | Error::Pair { source, .. } | Error::Training { source, .. } => {
                source.is_numeric()
            }
            _ => false,
        }
    }
}
