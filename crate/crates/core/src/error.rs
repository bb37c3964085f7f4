use std::path::PathBuf;

/// Every failure the library can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("policy error: {0}")]
    Policy(String),

    #[error("undefined score: {0}")]
    UndefinedScore(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("incomplete checkpoint: {0}")]
    IncompleteCheckpoint(String),

    #[error("corrupt weights: {0}")]
    CorruptWeights(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse { path: path.into(), message: message.to_string() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
