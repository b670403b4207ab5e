use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("empty example set: at least one input/output pair is required")]
    EmptyExamples,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("no detection: prediction has no foreground component")]
    NoDetection,
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable short identifier, used by the CLI and the HTTP service.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Geometry(_) => "geometry",
            Error::EmptyExamples => "empty_examples",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Index(_) => "index",
            Error::Precondition(_) => "precondition",
            Error::Argument(_) => "argument",
            Error::NoDetection => "no_detection",
            Error::Divergence(_) => "divergence",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}

macro_rules! geometry {
    ($($arg:tt)*) => { $crate::error::Error::Geometry(format!($($arg)*)) };
}
pub(crate) use geometry;
