use thiserror::Error;

/// Failures of a bench command; each kind maps to a stable exit code.
#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl BenchError {
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) => 2,
            BenchError::Data(_) => 3,
            BenchError::Runtime(_) => 4,
        }
    }

    /// Wraps an error raised while reading or validating input artifacts.
    pub fn data(e: impl std::fmt::Display) -> Self {
        BenchError::Data(e.to_string())
    }
}

impl From<call_core::Error> for BenchError {
    fn from(e: call_core::Error) -> Self {
        use call_core::Error as E;
        match e {
            E::InvalidArgument(_) => BenchError::Config(e.to_string()),
            E::Storage { .. } | E::Corruption { .. } => BenchError::Data(e.to_string()),
            E::Protocol(_) | E::Cache(_) => BenchError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for BenchError {
    fn from(e: std::io::Error) -> Self {
        BenchError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for BenchError {
    fn from(e: csv::Error) -> Self {
        BenchError::Runtime(e.to_string())
    }
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;
