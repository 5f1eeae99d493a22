use std::fmt;
use std::path::PathBuf;

/// One problem found while validating an input file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationIssue {
    pub file: String,
    pub line: Option<usize>,
    pub message: String,
}

impl ValidationIssue {
    pub fn new(file: impl Into<String>, line: Option<usize>, message: impl Into<String>) -> Self {
        Self {
            file: file.into(),
            line,
            message: message.into(),
        }
    }
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "{}:{}: {}", self.file, line, self.message),
            None => write!(f, "{}: {}", self.file, self.message),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid component id {0:?}")]
    ParseComponent(String),

    #[error("invalid snapshot id {0:?}")]
    ParseSnapshot(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("shape mismatch: expected length {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("degenerate token selector {selector} for fact {fact_id}")]
    DegenerateSelector { fact_id: String, selector: String },

    #[error("inconsistent data: {0}")]
    Consistency(String),

    #[error("missing logits for facts: {}", .0.join(", "))]
    MissingLogits(Vec<String>),

    #[error("component {0} is outside the analyzed universe")]
    UnknownComponent(String),

    #[error("validation failed with {} issue(s):\n{}", .0.len(), format_issues(.0))]
    Validation(Vec<ValidationIssue>),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

fn format_issues(issues: &[ValidationIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
