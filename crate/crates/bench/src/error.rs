use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] zolab_core::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}:{line}: {msg}")]
    ConfigFile { path: PathBuf, line: usize, msg: String },
    #[error("check failed: {0}")]
    Check(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl BenchError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BenchError::Io { path: path.into(), source }
    }

    /// 2 configuration, 3 out of memory, 4 numeric or check failure, 1 other.
    pub fn exit_code(&self) -> i32 {
        use zolab_core::Error as E;
        match self {
            BenchError::Config(_) | BenchError::ConfigFile { .. } => 2,
            BenchError::Core(E::Config(_) | E::Precondition(_)) => 2,
            BenchError::Core(e) if e.is_oom() => 3,
            BenchError::Core(_) => 4,
            BenchError::Check(_) => 4,
            BenchError::Io { .. } | BenchError::Csv(_) | BenchError::Json(_) => 1,
        }
    }
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;
