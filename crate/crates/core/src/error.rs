use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("line {line}: {message}")]
    Row { line: u64, message: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("design error: {message}")]
    Design { message: String, columns: Vec<String> },

    #[error("size error: {0}")]
    Size(String),

    #[error("solver did not converge: {message}")]
    Solver {
        message: String,
        best: Option<Vec<f64>>,
    },

    #[error("non-finite objective: {0}")]
    NonFinite(String),

    #[error("ordering error: {0}")]
    Ordering(String),

    #[error("mapping error: {0}")]
    Mapping(String),

    #[error("bootstrap error: {0}")]
    Bootstrap(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("refused: {0}")]
    Refused(String),

    #[error("linear algebra failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn design<S: Into<String>>(message: S, columns: Vec<String>) -> Self {
        Error::Design {
            message: message.into(),
            columns,
        }
    }

    pub(crate) fn solver<S: Into<String>>(message: S, best: Option<Vec<f64>>) -> Self {
        Error::Solver {
            message: message.into(),
            best,
        }
    }
}
