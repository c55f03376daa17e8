use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-positive output extent ({detail})")]
    OutputExtent { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("graph invariant violated: {0}")]
    Graph(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("constraint infeasible: {0}")]
    Infeasible(String),

    #[error("cannot decode parameters for node {node}: {detail}")]
    Decode { node: u32, detail: String },

    #[error("missing parameters for node {0}")]
    MissingParams(u32),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged on architecture {hash}: {detail}")]
    Diverged { hash: String, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
