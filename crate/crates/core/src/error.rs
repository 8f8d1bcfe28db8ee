use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {values} values")]
    InvalidShape { shape: Vec<usize>, values: usize },

    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("kernel {kernel:?} does not fit padded input {input:?}")]
    KernelTooLarge { kernel: (usize, usize), input: (usize, usize) },

    #[error("pooling window {window} exceeds input {input:?}")]
    WindowTooLarge { window: usize, input: (usize, usize) },

    #[error("dropout rate {0} outside [0, 1)")]
    InvalidRate(f64),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("token count {0} is not a perfect square")]
    NonSquareTokens(usize),

    #[error("token count {got} does not match layer weights trained for {expected}")]
    TokenCountMismatch { expected: usize, got: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite {what}: {value}")]
    NonFinite { what: &'static str, value: f64 },

    #[error("branch locations must be strictly ascending within 1..={depth}: {locations:?}")]
    UnsortedLocations { locations: Vec<usize>, depth: usize },

    #[error("branch location {location} outside 1..={depth}")]
    LocationOutOfRange { location: usize, depth: usize },

    #[error("no branch {arch} at location {location}")]
    MissingBranch { arch: String, location: usize },

    #[error("unknown branch architecture {0:?}")]
    UnknownArchitecture(String),

    #[error("unknown training strategy {0:?}")]
    UnknownStrategy(String),

    #[error("profiles mix metric kinds")]
    MixedMetrics,

    #[error("profile list is empty")]
    EmptyProfiles,

    #[error("no exit completed within a budget of {budget} FLOPs")]
    NoExitCompleted { budget: u64 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("{path}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated file, expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint config does not match model config")]
    ConfigMismatch,

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
