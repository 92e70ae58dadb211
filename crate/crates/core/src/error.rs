use crate::tensor::Shape;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch { op: String, lhs: String, rhs: String },

    #[error("{op}: {what} = {value} is not divisible by {by}{hint}")]
    NotDivisible {
        op: String,
        what: String,
        value: usize,
        by: usize,
        hint: String,
    },

    #[error("conv2d: groups = {groups} does not divide channel count {channels}")]
    BadGroups { channels: usize, groups: usize },

    #[error("{op}: image {h}x{w} is smaller than the required minimum {min}")]
    ImageTooSmall { op: String, h: usize, w: usize, min: usize },

    #[error("backward requires a scalar loss, got shape {shape}")]
    NonScalarLoss { shape: Shape },

    #[error("backward called twice on the same tape")]
    TapeConsumed,

    #[error("backward called on a disabled tape")]
    TapeDisabled,

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("config: unknown key `{0}`")]
    UnknownConfigKey(String),

    #[error("config: missing required key `{0}`")]
    MissingConfigKey(String),

    #[error("config: bad value for `{key}`: {msg}")]
    ConfigValue { key: String, msg: String },

    #[error("dataset: no target image for input `{0}`")]
    UnmatchedInput(String),

    #[error("dataset: no input image for target `{0}`")]
    UnmatchedTarget(String),

    #[error("dataset: `{path}` is not an 8-bit RGB PNG ({detail})")]
    BadImageFormat { path: String, detail: String },

    #[error("checkpoint: bad magic bytes (expected \"WVEN\")")]
    CheckpointMagic,

    #[error("checkpoint: unsupported format version {0}")]
    CheckpointVersion(u32),

    #[error("checkpoint: file truncated while reading {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint: corrupt data: {0}")]
    CheckpointCorrupt(String),

    #[error("checkpoint config mismatch on field `{field}`: checkpoint has `{found}`, model has `{expected}`")]
    ConfigEchoMismatch {
        field: String,
        found: String,
        expected: String,
    },

    #[error("training aborted: non-finite loss at step {step} ({breakdown})")]
    NanLoss { step: u64, breakdown: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape_mismatch(op: &str, lhs: impl std::fmt::Display, rhs: impl std::fmt::Display) -> Self {
        Error::ShapeMismatch {
            op: op.to_string(),
            lhs: lhs.to_string(),
            rhs: rhs.to_string(),
        }
    }

    pub(crate) fn not_divisible(op: &str, what: &str, value: usize, by: usize, hint: &str) -> Self {
        Error::NotDivisible {
            op: op.to_string(),
            what: what.to_string(),
            value,
            by,
            hint: if hint.is_empty() {
                String::new()
            } else {
                format!(" ({hint})")
            },
        }
    }
}
