use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("geometry error: polygon {index}: {reason}")]
    Geometry { index: usize, reason: String },
    #[error("statistics error: {0}")]
    Statistics(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("state error: {0}")]
    State(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 2 config, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Training(_) | Error::Domain(_) => 4,
            _ => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Dimension(_) => "dimension",
            Error::Geometry { .. } => "geometry",
            Error::Statistics(_) => "statistics",
            Error::Domain(_) => "domain",
            Error::State(_) => "state",
            Error::Input(_) => "input",
            Error::Training(_) => "training",
            Error::Checkpoint(_) => "checkpoint",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
