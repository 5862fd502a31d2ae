use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("window [{start}, {start}+{width}) out of range for series of length {len}")]
    WindowOutOfRange {
        start: usize,
        width: usize,
        len: usize,
    },
    #[error("window width must be at least 1")]
    ZeroWidth,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("malformed {what} in {}: {detail}", .path.display())]
    Malformed {
        what: &'static str,
        path: PathBuf,
        detail: String,
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("empty negative region: neighborhood of t={center} with halfwidth {delta} covers the series")]
    EmptyNegativeRegion { center: usize, delta: usize },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("label {label} outside [0, {n_classes})")]
    Label { label: usize, n_classes: usize },
    #[error("io error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error on {}: {source}", .path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv error on {}: {source}", .path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| {
            if source.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path)
            } else {
                Error::Io { path, source }
            }
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Error {
        let path = path.into();
        move |source| Error::Json { path, source }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>) -> impl FnOnce(csv::Error) -> Error {
        let path = path.into();
        move |source| Error::Csv { path, source }
    }
}
