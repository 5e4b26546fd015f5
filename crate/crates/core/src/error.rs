use thiserror::Error;

/// Errors raised by the estimation, correction and simulation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("model evaluation failed in cell {cell}: {message}")]
    ModelEvaluation { cell: usize, message: String },

    #[error("numerical integration did not reach tolerance (achieved relative error {achieved:.3e})")]
    Integration { achieved: f64 },

    #[error("zero likelihood at record {record}")]
    ZeroDensity { record: String },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("root bracketing failed: {0}")]
    Bracket(String),

    #[error("no solution: {0}")]
    NoSolution(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("simulation budget exhausted after {latent} latent draws ({published} published)")]
    Budget { latent: u64, published: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    /// True for errors caused by malformed user input rather than numerics.
    pub fn is_input(&self) -> bool {
        matches!(self, Error::Input(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
