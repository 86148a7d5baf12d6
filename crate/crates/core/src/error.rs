use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    Dimension {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("empty domain: {0}")]
    EmptyDomain(&'static str),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("ingestion failed for {} file(s): {}", .0.len(), list_paths(.0))]
    Ingest(Vec<(PathBuf, String)>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value at batch {batch}: {what}")]
    NonFinite { batch: usize, what: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: impl ToString, rhs: impl ToString) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_string(),
            rhs: rhs.to_string(),
        }
    }
}

fn list_paths(items: &[(PathBuf, String)]) -> String {
    let shown: Vec<String> = items
        .iter()
        .take(8)
        .map(|(p, why)| format!("{} ({why})", p.display()))
        .collect();
    let mut out = shown.join(", ");
    if items.len() > 8 {
        out.push_str(&format!(", and {} more", items.len() - 8));
    }
    out
}
