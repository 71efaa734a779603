use thiserror::Error;

/// Errors produced anywhere in the co-clustering pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid spline specification: {0}")]
    Spec(String),

    #[error("value {value} outside domain [{lo}, {hi}]")]
    Domain { value: f64, lo: f64, hi: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error at line {line}: {msg}")]
    Data { line: usize, msg: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("preprocessing error: {0}")]
    Preprocess(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("all attempts failed: {}", .0.join("; "))]
    AllFailed(Vec<String>),
}

impl Error {
    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Spec(_) => 2,
            Error::Data { .. } | Error::Parse { .. } | Error::Preprocess(_) | Error::Io(_) => 3,
            Error::Domain { .. } | Error::Shape(_) => 3,
            Error::Numeric(_) | Error::AllFailed(_) => 4,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
