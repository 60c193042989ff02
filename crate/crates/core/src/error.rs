use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {layer}: expected {expected}, got {got:?}")]
    Shape {
        layer: String,
        expected: String,
        got: Vec<usize>,
    },

    #[error("non-finite {what}{}", .iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    NonFinite {
        what: String,
        iteration: Option<usize>,
    },

    #[error("missing gradient for parameter {0}")]
    MissingGrad(String),

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("unknown action word {word:?}; valid words: {}", .vocabulary.join(", "))]
    UnknownWord {
        word: String,
        vocabulary: Vec<String>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("crc mismatch in {path}: expected {expected:08x}, found {found:08x}")]
    Crc {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("infeasible scene: {0}")]
    Infeasible(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("image codec: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, expected: impl Into<String>, got: &[usize]) -> Self {
        Error::Shape {
            layer: layer.into(),
            expected: expected.into(),
            got: got.to_vec(),
        }
    }

    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::MissingGrad(_) => "missing_grad",
            Error::Config(_) => "config",
            Error::UnknownWord { .. } => "unknown_word",
            Error::Checkpoint(_) => "checkpoint",
            Error::Dataset(_) => "dataset",
            Error::Crc { .. } => "crc",
            Error::Infeasible(_) => "infeasible",
            Error::Empty(_) => "empty",
            Error::Image(_) => "image",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
