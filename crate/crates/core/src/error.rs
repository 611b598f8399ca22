use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("U+{0:04X} is not a precomposed Hangul syllable")]
    NotHangulSyllable(u32),
    #[error("jamo index out of range: {slot} = {index}")]
    InvalidJamoIndex { slot: &'static str, index: usize },
    #[error("stroke table incomplete: {0}")]
    IncompleteStrokeTable(String),
    #[error("invalid schedule parameters: {0}")]
    InvalidScheduleParams(String),
    #[error("step {t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("cumulative signal level at step {0} has underflowed")]
    DegenerateStep(usize),
    #[error("token {0} outside the jamo vocabulary")]
    UnknownToken(usize),
    #[error("character index {index} outside charset of {size}")]
    UnknownCharacter { index: usize, size: usize },
    #[error("bad image shape: expected {expected}, got {got}")]
    BadImageShape { expected: String, got: String },
    #[error("conditioning bundle {part} has length {got}, expected {expected}")]
    BundleShapeMismatch { part: &'static str, expected: usize, got: usize },
    #[error("invalid dimension: {0}")]
    InvalidDim(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at iteration {iteration}: total={total} mse={mse} perceptual={perceptual}")]
    NonFiniteLoss { iteration: u64, total: f64, mse: f64, perceptual: f64 },
    #[error("font {font} has no glyph for U+{codepoint:04X}")]
    GlyphNotInFont { font: String, codepoint: u32 },
    #[error("unreadable font {0}")]
    BadFont(PathBuf),
    #[error("dataset is empty: {0}")]
    EmptyDataset(String),
    #[error("image side {side} is smaller than the {window}x{window} window")]
    WindowTooLarge { side: usize, window: usize },
    #[error("need at least 2 samples, got {0}")]
    InsufficientSamples(usize),
    #[error("invalid feature statistics: {0}")]
    InvalidStats(String),
    #[error("unmatched image files: {}", .0.join(", "))]
    MissingPair(Vec<String>),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("png {path}: {message}")]
    Png { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
