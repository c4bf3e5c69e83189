use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("arity error: expected {expected} items, got {actual}")]
    Arity { expected: usize, actual: usize },
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("precision error: {0}")]
    Precision(String),
    #[error("degenerate schedule: {0}")]
    DegenerateSchedule(String),
    #[error("singular step: {0}")]
    SingularStep(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("ingestion error: {0}")]
    Ingest(String),
    #[error("config error (line {line}, key `{key}`): {msg}")]
    Config { line: usize, key: String, msg: String },
    #[error("record error (line {line}): {msg}")]
    Record { line: usize, msg: String },
    #[error("checkpoint load error: {0}")]
    Load(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
