use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Fewer than `needed` directions exceed the rank tolerance.
    #[error("rank deficient: {context} (needed rank {needed}, found {found})")]
    RankDeficient {
        context: String,
        needed: usize,
        found: usize,
    },

    #[error("covariance matrix is numerically singular: {0}")]
    SingularCovariance(String),

    #[error("M-step system is numerically singular")]
    SingularMStep,

    #[error("least-squares subproblem is rank deficient: {0}")]
    SingularSubproblem(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("missing column: {0}")]
    MissingColumn(String),

    #[error("non-numeric cell {value:?} in {file} at row {row}, column {column:?}")]
    NonNumericCell {
        file: String,
        row: usize,
        column: String,
        value: String,
    },

    #[error("empty file: {0}")]
    EmptyFile(String),

    #[error("zero variance in column {0:?}")]
    ZeroVariance(String),

    #[error("duplicate column {0:?}")]
    DuplicateColumn(String),

    #[error("model file schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("unsupported model file version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical routines, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient { .. }
                | Error::SingularCovariance(_)
                | Error::SingularMStep
                | Error::SingularSubproblem(_)
                | Error::NonFinite(_)
        )
    }
}
