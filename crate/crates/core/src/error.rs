use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {size} pixels is not divisible into {blocks} blocks along {axis}")]
    DimensionMismatch {
        axis: &'static str,
        size: usize,
        blocks: usize,
    },
    #[error("out of bounds: {0}")]
    OutOfBounds(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("class count mismatch: expected {expected}, found {found}")]
    ClassCountMismatch { expected: usize, found: usize },
    #[error("class {class} at ({row}, {col}) is outside the vocabulary of {num_classes} classes")]
    InvalidClass {
        row: usize,
        col: usize,
        class: usize,
        num_classes: usize,
    },
    #[error("the grid contains Unknown cells where fully known data is required")]
    UnknownCellPresent,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("distribution length mismatch: {0}")]
    LengthMismatch(String),
    #[error("coordinate mismatch: {0}")]
    CoordMismatch(String),
    #[error("mask {mask_rows}x{mask_cols} does not fit a {rows}x{cols} grid")]
    MaskTooLarge {
        mask_rows: usize,
        mask_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("labels missing for {} masked cells: {missing:?}", missing.len())]
    IncompleteLabels { missing: Vec<(usize, usize)> },
    #[error("labels given for cells that are not masked: {extra:?}")]
    UnexpectedLabels { extra: Vec<(usize, usize)> },
    #[error("invalid scene grammar: {0}")]
    InvalidGrammar(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn parse(line: usize, column: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            column,
            message: message.into(),
        }
    }

    pub(crate) fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }
}
