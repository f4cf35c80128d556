use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, BtnError>;

#[derive(Debug, Error)]
pub enum BtnError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("layer {index} ({kind}): expected input shape {expected:?}, got {actual:?}")]
    LayerShape {
        index: usize,
        kind: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("layer cache does not match layer or gradient: {0}")]
    StaleCache(String),

    #[error("non-affine layer: {0} has no weight matrix")]
    NonAffineLayer(&'static str),

    #[error("interval invariant violated at index {index}: lower {lower} > upper {upper}")]
    IntervalOrder { index: usize, lower: f64, upper: f64 },

    #[error("non-finite value at index {index} in {context}")]
    NonFinite { context: &'static str, index: usize },

    #[error("model geometry: {0}")]
    Geometry(String),

    #[error("invalid perturbation: {0}")]
    InvalidPerturbation(String),

    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),

    #[error("invalid configuration field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("epoch {epoch} out of range (total {total})")]
    EpochOutOfRange { epoch: usize, total: usize },

    #[error("training diverged at epoch {epoch}: total loss is {value}")]
    Diverged { epoch: usize, value: f64 },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated data while reading {0}")]
    Truncated(&'static str),

    #[error("checksum mismatch in {path}: stored {stored:08x}, computed {computed:08x}")]
    Checksum {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("malformed {what}: {reason}")]
    Malformed { what: String, reason: String },

    #[error("annotation row {row}: head ({r}, {c}) outside {height}x{width} image")]
    HeadOutOfBounds {
        row: usize,
        r: f64,
        c: f64,
        height: usize,
        width: usize,
    },

    #[error("refusing grid enumeration: {0}")]
    GridTooLarge(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("I/O error: {0}")]
    Stream(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl BtnError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BtnError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        BtnError::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
