use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("zero-norm vector in {0}")]
    ZeroVector(&'static str),

    #[error("degenerate director (|d| = {norm:e}){}", pair_suffix(.pair))]
    DegenerateDirector {
        /// `(text, video)` batch indices when raised from a grid.
        pair: Option<(usize, usize)>,
        norm: f64,
    },

    #[error("non-finite value in {0}")]
    NonFiniteData(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in {path}: expected \"TVPX\", found {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported tensor dtype tag {0}")]
    UnsupportedDtype(u8),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("batch size {0} is too small (contrastive batches need at least 2)")]
    BatchTooSmall(usize),

    #[error("score grids need a square batch, got {texts} texts and {videos} videos")]
    NonSquareBatch { texts: usize, videos: usize },

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("text {0} has no ground-truth video")]
    MissingGroundTruth(usize),

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn pair_suffix(pair: &Option<(usize, usize)>) -> String {
    match pair {
        Some((t, v)) => format!(" for text {t}, video {v}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem rather than by the inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Csv(_))
    }
}
