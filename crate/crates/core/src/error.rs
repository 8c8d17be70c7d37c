use std::path::PathBuf;

use thiserror::Error;

use crate::model::ComponentKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("no component {kind} at layer {layer}")]
    Addressing { layer: usize, kind: ComponentKind },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("schema violation{}: {message}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    Schema { row: Option<usize>, message: String },

    #[error("scorer failed: {0}")]
    Scorer(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("checksum mismatch for {path}: expected {expected}, got {actual}")]
    Checksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn schema(row: impl Into<Option<usize>>, message: impl Into<String>) -> Self {
        Error::Schema {
            row: row.into(),
            message: message.into(),
        }
    }
}
