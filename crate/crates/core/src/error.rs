use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid capture pattern: {0}")]
    InvalidPattern(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("index {index} out of range for {len} lists")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("Petersen estimator undefined: no units on both lists")]
    ZeroOverlap,

    #[error("odd/even imputation undefined: even-sum pattern {0} has zero probability")]
    DivisionByZero(String),

    #[error("model fit did not converge: {0}")]
    NonConvergence(String),

    #[error("AICc undefined: eta {eta} <= q + 2 with q = {q}")]
    InadmissibleModel { q: usize, eta: f64 },

    #[error("simulated sample is empty: no unit was captured")]
    EmptySample,

    #[error("bootstrap failed: {failed} of {reps} replicates failed")]
    BootstrapFailure { failed: usize, reps: usize },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
