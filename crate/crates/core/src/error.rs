use std::path::PathBuf;

/// Errors raised anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("solver error: {0}")]
    Solver(String),

    #[error("format error in {tensor}: {message}")]
    Format { tensor: String, message: String },

    #[error("plan error: {0}")]
    Plan(String),

    #[error("mask error: {0}")]
    Mask(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("spec error ({field}): {message}")]
    Spec { field: String, message: String },

    #[error("mapping error: {0}")]
    Mapping(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing fixture: {}", .0.display())]
    MissingFixture(PathBuf),

    #[error("training diverged at step {step}: loss {loss} exceeds 10x initial {initial}")]
    Diverged {
        step: usize,
        loss: f64,
        initial: f64,
        curve: Vec<f64>,
    },

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("cancelled")]
    Cancelled,

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn spec(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Spec {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn format(tensor: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            tensor: tensor.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
