use std::path::PathBuf;

use thiserror::Error;

use crate::ids::{Cycle, GridId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("duplicate grid id {0}")]
    DuplicateGrid(GridId),

    #[error("history ordering violated: entry at cycle {past} is not before cycle {current}")]
    Ordering { past: Cycle, current: Cycle },

    #[error("value {0} is outside the fixed-point range")]
    FixedPointRange(f64),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("malformed report: {0}")]
    MalformedReport(String),

    #[error("unregistered source {0}")]
    Unregistered(u32),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("arithmetic anomaly in {algorithm} at cycle {cycle}: {detail}")]
    Anomaly {
        algorithm: String,
        cycle: Cycle,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
