use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("value {value} at index {index} outside [{lo}, {hi}]")]
    ValueOutOfRange { index: usize, value: f64, lo: f64, hi: f64 },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("shift ({dx}, {dy}) too large for {width}x{height} image")]
    ShiftTooLarge {
        dx: i64,
        dy: i64,
        width: usize,
        height: usize,
    },

    #[error("event {index} at ({x}, {y}) outside {width}x{height} sensor")]
    EventOutOfBounds {
        index: usize,
        x: u32,
        y: u32,
        width: usize,
        height: usize,
    },

    #[error("invalid event polarity {0}")]
    InvalidPolarity(i8),

    #[error("timestamps decrease at event {index} ({prev} -> {next})")]
    UnsortedTimestamps { index: usize, prev: i64, next: i64 },

    #[error("non-finite input at index {0}")]
    NonFiniteInput(usize),

    #[error("every pixel is IGNORE; no supervised pixels")]
    AllIgnored,

    #[error("label {label} at index {index} not below class count {classes}")]
    InvalidLabel { index: usize, label: u8, classes: usize },

    #[error("class count mismatch: {0} vs {1}")]
    ClassCountMismatch(usize, usize),

    #[error("no class has a defined IoU")]
    NoDefinedClasses,

    #[error("non-finite loss at step {step}: source {source_loss}, target {target_loss}")]
    NonFiniteLoss {
        step: usize,
        source_loss: f64,
        target_loss: f64,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn dims(what: impl Into<String>) -> Self {
        Error::DimensionMismatch(what.into())
    }
}
