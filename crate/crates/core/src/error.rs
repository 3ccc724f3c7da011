use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported image format in {path}: {detail}")]
    UnsupportedFormat { path: PathBuf, detail: String },
    #[error("corrupt image header in {path}: {detail}")]
    CorruptHeader { path: PathBuf, detail: String },
    #[error("crop of {size}px exceeds image {width}x{height}")]
    CropTooLarge {
        size: usize,
        width: usize,
        height: usize,
    },
    #[error("image {width}x{height} is too small for a {rows}x{cols} patch grid")]
    ImageTooSmall {
        width: usize,
        height: usize,
        rows: usize,
        cols: usize,
    },
    #[error("unknown distortion kind `{0}`")]
    UnknownKind(String),
    #[error("invalid registry: {0}")]
    Registry(String),
    #[error("recipe has no steps")]
    EmptyRecipe,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("forward pass has not been run on this batch")]
    MissingForward,
    #[error("bad file format: {0}")]
    Format(String),
    #[error("config: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("empty corpus: no decodable images in {0}")]
    EmptyCorpus(PathBuf),
    #[error("record {record}")]
    Record {
        record: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io { .. } | Error::Record { .. } => false,
            _ => true,
        }
    }
}
