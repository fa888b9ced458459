use std::path::PathBuf;

use thiserror::Error;

use crate::benchmark::Shortage;
use crate::model::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{location}: {message}")]
    Parse { location: String, message: String },

    #[error("invalid label space: {0}")]
    InvalidLabelSpace(String),

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("dataset failed validation with {} violation(s): {}", .0.len(), summarize(.0))]
    Validation(Vec<Violation>),

    #[error("too few eligible labels: need {required}, found {available} (short by {})", .required - .available)]
    TooFewEligibleLabels { required: usize, available: usize },

    #[error("label shortage: {}", shortage_list(.0))]
    LabelShortage(Vec<Shortage>),

    #[error("instance {instance_id} has no anchor for role {role:?}")]
    MissingAnchor { instance_id: String, role: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("score file is missing {} triplet id(s): {}", .missing.len(), .missing.join(", "))]
    MissingScores { missing: Vec<String> },

    #[error("inconsistent scores: {0}")]
    ScoreMismatch(String),

    #[error("prediction coverage mismatch: missing [{}], extra [{}]", .missing.join(", "), .extra.join(", "))]
    CoverageMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("backend request failed after {attempts} attempt(s): {message}")]
    Backend { message: String, attempts: u32 },

    #[error("scoring aborted, {} triplet(s) unfetched: {message}", .unfetched.len())]
    BatchFailed {
        message: String,
        unfetched: Vec<String>,
    },

    #[error("completion backend failed for label {label:?} on attempt {attempt}: {source}")]
    Generation {
        label: String,
        attempt: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unmet stage dependency: {0}")]
    Dependency(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Backend { .. } | Error::BatchFailed { .. } | Error::Generation { .. } => 2,
            Error::Dependency(_) => 3,
            _ => 1,
        }
    }
}

fn summarize(violations: &[Violation]) -> String {
    let mut parts: Vec<String> = violations.iter().take(5).map(|v| v.to_string()).collect();
    if violations.len() > 5 {
        parts.push(format!("... and {} more", violations.len() - 5));
    }
    parts.join("; ")
}

fn shortage_list(shortages: &[Shortage]) -> String {
    shortages
        .iter()
        .map(|s| format!("{} (required {}, available {})", s.label, s.required, s.available))
        .collect::<Vec<_>>()
        .join(", ")
}
