use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("unknown variant `{0}`")]
    UnknownVariant(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("unknown category `{category}` for task {task}")]
    UnknownCategory { task: u8, category: String },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Errors raised while decoding MMEB dataset files and FUSN model files.
#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated file: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),

    #[error("non-finite value in record `{id}`")]
    NonFinite { id: String },

    #[error("record `{id}` has label {label} but only {num_classes} classes")]
    LabelOutOfRange { id: String, label: u32, num_classes: u16 },

    #[error("malformed content: {0}")]
    Malformed(String),
}
