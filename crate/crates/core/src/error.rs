use std::io;

use thiserror::Error;

/// (rows, cols)
pub type Shape = (usize, usize);

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("mask selects no positions")]
    EmptyMask,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { expected: u32, found: u32 },

    #[error("file truncated while reading {what}")]
    Truncated { what: String },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("example {index} has an all-false mask")]
    ZeroMaskExample { index: usize },

    #[error("label {label} has no entry in the label map")]
    UnmappedLabel { label: u32 },

    #[error("bundle carries no labels")]
    MissingLabels,

    #[error("numeric failure: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
