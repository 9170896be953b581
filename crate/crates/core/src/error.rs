use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite coordinate: {0}")]
    InvalidCoordinate(String),
    #[error("need at least {needed} chords, got {got}")]
    InsufficientChords { needed: usize, got: usize },
    #[error("degenerate volume: {0}")]
    DegenerateVolume(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("empty video")]
    EmptyVideo,
    #[error("format error: {0}")]
    FormatError(String),
    #[error("label error: {0}")]
    LabelError(String),
    #[error("generation error: {0}")]
    GenerationError(String),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("degenerate targets: ground truth has zero variance")]
    DegenerateTargets,
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
