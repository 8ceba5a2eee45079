use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("transmission {value} below floor {floor}")]
    DegenerateTransmission { value: f64, floor: f64 },

    #[error("image too small for multi-scale config: {0}")]
    ScaleConfig(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error at {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {}: {message}", .path.display())]
    Image { path: PathBuf, message: String },

    #[error("malformed file {}: {message}", .path.display())]
    Format { path: PathBuf, message: String },

    #[error("corrupt model: {0}")]
    CorruptModel(String),

    #[error("training diverged at step {step} (last good checkpoint: {})", last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    Diverged { step: usize, last_good: Option<PathBuf> },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingFile(_) => 2,
            Error::Config(_) | Error::ScaleConfig(_) => 3,
            Error::Diverged { .. } => 4,
            Error::InvalidInput(_) | Error::Shape(_) | Error::DegenerateTransmission { .. } => 5,
            Error::CorruptModel(_) | Error::Format { .. } | Error::Image { .. } => 6,
            Error::Io { .. } => 7,
        }
    }
}
