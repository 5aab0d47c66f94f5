use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("missing image file: {0}")]
    MissingImage(PathBuf),

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("duplicate tile id `{0}`")]
    DuplicateTile(String),

    #[error("unknown tile id `{0}`")]
    UnknownTile(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("class `{0}` has no usable tiles")]
    EmptyClass(String),

    #[error("class `{class}` has {available} tiles, needs at least {needed}")]
    ClassTooSmall {
        class: String,
        available: usize,
        needed: usize,
    },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("{what} = {value} is outside {range}")]
    Range {
        what: &'static str,
        value: i64,
        range: String,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
