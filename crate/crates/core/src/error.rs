use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("not found: {0}")]
    NotFound(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported bit depth: {0} (only 8-bit PNG is supported)")]
    UnsupportedBitDepth(u8),

    #[error("unsupported color type: {0} (only 8-bit grayscale or RGB without alpha)")]
    UnsupportedColorType(String),

    #[error("corrupt PNG stream: {0}")]
    CorruptPng(String),

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("image {height}x{width} is smaller than the required {required}x{required}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        required: usize,
    },

    #[error("patch {patch} exceeds image dimensions {height}x{width}")]
    PatchTooLarge {
        patch: usize,
        height: usize,
        width: usize,
    },

    #[error("duplicate entry name: {0}")]
    DuplicateName(String),

    #[error("tile at ({row}, {col}): {source}")]
    Tile {
        row: usize,
        col: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("self-ensemble branch {transform}: {source}")]
    Transform {
        transform: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("external denoiser failed ({status}): {stderr}")]
    ExternalFailed { status: String, stderr: String },

    #[error("external denoiser timed out after {0:.1} s")]
    ExternalTimeout(f64),

    #[error("external denoiser output shape mismatch: expected {expected:?}, found {found:?}")]
    ExternalShapeMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },

    #[error("external denoiser did not produce {0}")]
    ExternalMissingOutput(PathBuf),

    #[error("could not launch external denoiser: {0}")]
    ExternalSpawn(String),

    #[error("unmatched filenames: missing predictions {missing:?}, unexpected predictions {extra:?}")]
    Unmatched {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("output {0} already exists (pass --force to overwrite)")]
    OutputExists(PathBuf),

    #[error("{file}: {stage}: {source}")]
    Stage {
        file: String,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: malformed CSV: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// Innermost error, looking through tile/transform/stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Tile { source, .. }
            | Error::Transform { source, .. }
            | Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// True when the failure originates in an external denoiser process.
    pub fn is_external(&self) -> bool {
        matches!(
            self.root(),
            Error::ExternalFailed { .. }
                | Error::ExternalTimeout(_)
                | Error::ExternalMissingOutput(_)
                | Error::ExternalShapeMismatch { .. }
                | Error::ExternalSpawn(_)
        )
    }
}
