use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {what} must be {constraint}, got {value}")]
    Domain {
        what: &'static str,
        constraint: &'static str,
        value: f64,
    },

    #[error("degenerate service class `{class}`: {reason}")]
    DegenerateClass { class: String, reason: String },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("scenario error at `{key}`: {message}")]
    Scenario { key: String, message: String },

    #[error("infeasible program: {0}")]
    Infeasible(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn scenario(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Scenario {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable tag, used by the CLI error envelope.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain { .. } => "domain",
            Error::DegenerateClass { .. } => "degenerate_class",
            Error::Dimension { .. } => "dimension",
            Error::Scenario { .. } => "scenario",
            Error::Infeasible(_) => "infeasible",
            Error::Numerical(_) => "numerical",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_nonneg(what: &'static str, value: f64) -> Result<()> {
    if value >= 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain {
            what,
            constraint: "finite and >= 0",
            value,
        })
    }
}
