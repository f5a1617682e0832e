use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Stream(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("design matrix is rank deficient; collinear columns: {}", .columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("logit did not converge: {0}")]
    Separation(String),

    #[error("timing scores are defined on crash events only (event {0})")]
    NotCrash(String),

    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: &'static str, message: String },

    #[error("missing upstream artifact `{artifact}`; run stage `{stage}` first")]
    MissingStage {
        stage: &'static str,
        artifact: String,
    },

    #[error("infeasible synthetic config: {0}")]
    Infeasible(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// A non-fatal problem found while processing input. Diagnostics are counted
/// in run manifests and echoed through the `log` facade.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Diagnostic {
    pub source: &'static str,
    pub line: Option<usize>,
    pub message: String,
}

impl Diagnostic {
    pub fn new(source: &'static str, line: Option<usize>, message: impl Into<String>) -> Self {
        let d = Diagnostic {
            source,
            line,
            message: message.into(),
        };
        match d.line {
            Some(l) => log::warn!("[{}] line {}: {}", d.source, l, d.message),
            None => log::warn!("[{}] {}", d.source, d.message),
        }
        d
    }
}
