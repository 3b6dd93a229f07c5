use std::fmt;

/// One offending axis in an architecture that does not belong to its space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupDiagnostic {
    pub group: usize,
    pub axis: &'static str,
    pub value: String,
    pub reason: String,
}

impl fmt::Display for GroupDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "group {}: {} = {}: {}",
            self.group + 1,
            self.axis,
            self.value,
            self.reason
        )
    }
}

fn join_diagnostics(diags: &[GroupDiagnostic]) -> String {
    diags
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid search space: {0}")]
    InvalidSpace(String),

    #[error("architecture has {got} group choices but the space has {expected} groups")]
    LengthMismatch { expected: usize, got: usize },

    #[error("invalid architecture: {}", join_diagnostics(.0))]
    InvalidArch(Vec<GroupDiagnostic>),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("cost model error at {label}: {reason}")]
    Cost { label: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing forward context: {0}")]
    MissingContext(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidSpace(_) => "invalid_space",
            Error::LengthMismatch { .. } | Error::InvalidArch(_) => "invalid_arch",
            Error::InvalidValue(_) => "invalid_value",
            Error::Cost { .. } => "cost",
            Error::Shape(_) => "shape",
            Error::MissingContext(_) => "missing_context",
            Error::NonFinite(_) => "non_finite",
            Error::Unsupported(_) => "unsupported",
            Error::Schema(_) => "schema",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
