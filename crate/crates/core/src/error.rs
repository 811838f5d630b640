use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A trajectory or series could not be generated with finite values.
    #[error("generation failed for series {series} ({params}): {reason}")]
    Generation {
        series: usize,
        params: String,
        reason: String,
    },

    #[error("usage: {0}")]
    Usage(String),

    /// Non-finite or diverging loss during training.
    #[error("training aborted at epoch {epoch}: loss {loss} (batch series {batch:?})")]
    Training {
        epoch: usize,
        loss: f64,
        batch: Vec<usize>,
    },

    #[error("duplicate key, existing row {existing_row}")]
    DuplicateKey { existing_row: usize },

    #[error("schema mismatch in {path}: {detail}")]
    Schema { path: PathBuf, detail: String },

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
