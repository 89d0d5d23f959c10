use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("duplicate passage id {0:?}")]
    DuplicateId(String),

    #[error("passage {passage:?}: mention [{start}, {end}) {msg}")]
    BadMention {
        passage: String,
        start: usize,
        end: usize,
        msg: String,
    },

    #[error("unknown passage id {0:?}")]
    UnknownPassage(String),

    #[error("no feedback documents")]
    NoFeedbackDocs,

    #[error("degenerate training set: {0}")]
    DegenerateTrainingSet(String),

    #[error("empty gold set")]
    EmptyGold,

    #[error("no ranking for question {0:?}")]
    MissingQuestion(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("index file: {0}")]
    IndexFormat(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("encoder at {endpoint}: {cause}")]
    Encoder { endpoint: String, cause: String },

    #[error("batch element {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the remote encoder (connection, protocol, dimension).
    pub fn is_encoder(&self) -> bool {
        match self {
            Error::Encoder { .. } => true,
            Error::Batch { source, .. } => source.is_encoder(),
            _ => false,
        }
    }
}
