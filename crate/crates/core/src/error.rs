use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown dataset '{0}'")]
    UnknownDataset(String),

    #[error("dataset '{dataset}' has no class named '{name}'")]
    UnknownClass { dataset: String, name: String },

    #[error("invalid directive: {0}")]
    Directive(String),

    #[error("label-space merge failed: {0}")]
    Merge(String),

    #[error("expected single-channel label map, got {channels} channels")]
    ExpectedSingleChannel { channels: u8 },

    #[error("expected 3-channel color-coded label map, got {channels} channels")]
    ExpectedThreeChannels { channels: u8 },

    #[error("unsupported bit depth {depth}; expected 8 bits per sample")]
    BitDepth { depth: u8 },

    #[error("16-bit label value {value} at ({x}, {y}) does not fit in 8 bits")]
    NarrowingOverflow { value: u16, x: u32, y: u32 },

    #[error("color channel out of strict range at ({x}, {y}): rgb({r}, {g}, {b})")]
    ColorRange { x: u32, y: u32, r: u8, g: u8, b: u8 },

    #[error("undeclared label id {id} at ({x}, {y}) for dataset '{dataset}'")]
    UndeclaredId { dataset: String, id: u8, x: u32, y: u32 },

    #[error("label id {id} is outside the universal space of {k} classes")]
    OutOfSpace { id: u8, k: usize },

    #[error("raster is in the wrong label-space: expected {expected}, found {found}")]
    SpaceMismatch { expected: String, found: String },

    #[error("dimension mismatch: {left_w}x{left_h} vs {right_w}x{right_h}")]
    DimensionMismatch { left_w: u32, left_h: u32, right_w: u32, right_h: u32 },

    #[error("invalid raster: {0}")]
    InvalidRaster(String),

    #[error("class count mismatch: {0} vs {1}")]
    ClassCountMismatch(usize, usize),

    #[error("no defined IoU in the evaluated class subset")]
    NoDefinedIou,

    #[error("zero evaluation pixels: {0}")]
    EmptyHistogram(String),

    #[error("invalid split request: {0}")]
    SplitRequest(String),

    #[error("invalid pairing rule: {0}")]
    PairingRule(String),

    #[error("image decode failed for {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("manifest {path}, line {line}: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Config(String),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse { line, message: message.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
