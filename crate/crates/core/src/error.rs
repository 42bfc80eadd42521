use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("tape error: {0}")]
    Tape(String),

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("cycle detected in graph: {}", .0.join(" -> "))]
    Cycle(Vec<String>),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("unknown node id `{0}`")]
    UnknownNode(String),

    #[error("{path}:{line}: {msg}")]
    Record {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("model/graph mismatch: {0}")]
    Model(String),

    #[error("metric undefined for {stratum}: {msg}")]
    Metric { stratum: String, msg: String },

    #[error("non-finite loss at {0}")]
    NonFiniteLoss(String),

    #[error("numerical check failed: {0}")]
    Numerical(String),

    #[error("unreachable prevalence target {target} for node `{node}`")]
    Prevalence { node: String, target: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Input-validation failures, as opposed to runtime or numerical ones.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape { .. }
                | Error::Cycle(_)
                | Error::Graph(_)
                | Error::UnknownNode(_)
                | Error::Record { .. }
                | Error::Dataset(_)
                | Error::Config(_)
                | Error::Model(_)
                | Error::Metric { .. }
                | Error::UnknownParam(_)
                | Error::Json(_)
                | Error::Io { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
