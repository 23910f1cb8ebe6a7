use std::path::PathBuf;

use crate::interchange::Time;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("invalid rle: {0}")]
    Rle(String),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("demodulation check failed: {0}")]
    Demodulation(String),
    #[error("empty mask{}", .0.map(|id| format!(" (proposal {id})")).unwrap_or_default())]
    EmptyMask(Option<u64>),
    #[error("both masks are empty")]
    EmptyUnion,
    #[error("zero-norm embedding: {0}")]
    ZeroNorm(String),
    #[error("unresolvable point ({x}, {y}) at {time}: {}", match .nearest_distance {
        Some(d) => format!("nearest proposal centroid is {d:.1} px away"),
        None => "no proposals at that time".to_string(),
    })]
    UnresolvablePoint {
        x: usize,
        y: usize,
        time: Time,
        nearest_distance: Option<f64>,
    },
    #[error("degenerate threshold input: {0}")]
    DegenerateHistogram(String),
    #[error("rank-deficient cloud: requested {requested} components, {available} available")]
    RankDeficient { requested: usize, available: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no ground-truth instances")]
    EmptyGroundTruth,
    #[error("unknown proposal id {0}")]
    UnknownProposal(u64),
    #[error("image error: {0}")]
    Image(String),
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that indicate a bug in the engine rather than bad input.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Internal(_))
    }
}
