use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by every module in the crate.
///
/// Variants split along the boundary the CLI cares about: anything that is an
/// I/O or decode failure maps to exit code 2, everything else (validation,
/// malformed input, contract violations) maps to exit code 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image decode error at {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("png decode error at {path}: {source}")]
    PngDecode {
        path: PathBuf,
        #[source]
        source: png::DecodingError,
    },
    #[error("png encode error at {path}: {source}")]
    PngEncode {
        path: PathBuf,
        #[source]
        source: png::EncodingError,
    },
    #[error("unknown sample id `{0}`")]
    UnknownId(String),
    #[error("label value out of range: {value} with {n_classes} classes (sample `{id}`)")]
    LabelOutOfRange {
        id: String,
        value: u8,
        n_classes: usize,
    },
    #[error("dimension mismatch: {context} ({left_h}x{left_w} vs {right_h}x{right_w})")]
    DimensionMismatch {
        context: String,
        left_h: usize,
        left_w: usize,
        right_h: usize,
        right_w: usize,
    },
    #[error("class index {index} out of range for {n} classes")]
    ClassOutOfRange { index: usize, n: usize },
    #[error("malformed manifest at {path}: {msg}")]
    MalformedManifest { path: PathBuf, msg: String },
    #[error("malformed matrix file at {path}: {msg}")]
    MalformedMatrix { path: PathBuf, msg: String },
    #[error("malformed checkpoint at {path}: {msg}")]
    MalformedCheckpoint { path: PathBuf, msg: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty evaluation: no class present in ground truth or prediction")]
    EmptyEvaluation,
    #[error("non-finite gradient in `{tensor}`; training halted")]
    NonFiniteGradient { tensor: String },
    #[error("missing prediction for id `{0}`")]
    MissingPrediction(String),
    #[error("missing instance map for id `{0}`")]
    MissingInstanceMap(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

impl Error {
    /// True for failures caused by the environment (unreadable or undecodable
    /// files) rather than by invalid input values.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::ImageDecode { .. }
                | Error::PngDecode { .. }
                | Error::PngEncode { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
