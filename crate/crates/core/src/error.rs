use ptmtok_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ParseError: {msg}{}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Parse { line: Option<usize>, msg: String },
    #[error("DatasetError: {0}")]
    Dataset(String),
    #[error("GeometryError: {0}")]
    Geometry(String),
    #[error("ShapeError: {0}")]
    Shape(String),
    #[error("IndexError: {0}")]
    Index(String),
    #[error("NumericalError: {0}")]
    Numerical(String),
    #[error("TrainError: {msg} (step {step})")]
    Train { step: usize, msg: String },
    #[error("CheckpointError: {0}")]
    Checkpoint(String),
    #[error("SplitError: {0}")]
    Split(String),
    #[error("ConfigError: {0}")]
    Config(String),
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line: Some(line),
            msg: msg.into(),
        }
    }

    /// Short machine-readable class name, e.g. `"DatasetError"`.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "ParseError",
            Error::Dataset(_) => "DatasetError",
            Error::Geometry(_) => "GeometryError",
            Error::Shape(_) => "ShapeError",
            Error::Index(_) => "IndexError",
            Error::Numerical(_) => "NumericalError",
            Error::Train { .. } => "TrainError",
            Error::Checkpoint(_) => "CheckpointError",
            Error::Split(_) => "SplitError",
            Error::Config(_) => "ConfigError",
            Error::Io(_) => "IoError",
        }
    }
}

impl From<AutodiffError> for Error {
    fn from(e: AutodiffError) -> Self {
        match e {
            AutodiffError::Shape(m) => Error::Shape(m),
            AutodiffError::Numerical(m) => Error::Numerical(m),
            AutodiffError::Checkpoint(m) => Error::Checkpoint(m),
            AutodiffError::Io(e) => Error::Io(e),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse {
            line: Some(e.line()),
            msg: e.to_string(),
        }
    }
}
